import math

import pandas as pd
import pytest
import torch

from llmdiff.adapter import (
    SCALE_COLUMNS,
    AdapterLayerState,
    adapter_forward,
    check_frozen,
    count_parameters,
    init_adapter,
    scale_report,
    summarize_scales,
    train_adapter_step,
    trainable_parameters,
    write_scale_report,
)
from llmdiff.diffusion import SITE_NAMES, CrossAttentionSite, DenoiserNet, make_schedule
from llmdiff.encoding import TextEncoding
from llmdiff.numerics import RandomStream, gaussian_sample, set_frozen
from llmdiff.verify import ADAPTER_TRAINABLE, check_freezing, mini_denoiser, mini_lm, mini_score


def _layer(init_a2=0.1):
    torch.manual_seed(0)
    site = CrossAttentionSite(8, 6, 2)
    return site, AdapterLayerState("mid", site, lm_dim=10, init_a2=init_a2)


def _inputs():
    q = gaussian_sample(RandomStream(1), (5, 8), torch.float32)
    c = gaussian_sample(RandomStream(2), (4, 10), torch.float32)
    return q, c


def test_zero_new_scale_reproduces_the_site():
    site, layer = _layer(init_a2=0.0)
    q, c = _inputs()
    with torch.no_grad():
        assert torch.allclose(adapter_forward(q, c, layer), site.attend(q, layer.phi(c)), atol=1e-6)


def test_phi_starts_as_truncated_identity():
    _, layer = _layer()
    c = gaussian_sample(RandomStream(3), (4, 10), torch.float32)
    with torch.no_grad():
        assert torch.equal(layer.phi(c), c[:, :6])


def test_both_scales_zero_gives_zero():
    _, layer = _layer()
    q, c = _inputs()
    with torch.no_grad():
        layer.a1.zero_()
        layer.a2.zero_()
        assert torch.equal(adapter_forward(q, c, layer), torch.zeros(5, 8))


def test_shifting_b1_by_ln2_doubles_the_frozen_branch():
    _, layer = _layer(init_a2=0.0)
    q, c = _inputs()
    with torch.no_grad():
        before = adapter_forward(q, c, layer)
        layer.b1.fill_(math.log(2.0))
        after = adapter_forward(q, c, layer)
    assert torch.allclose(after, 2.0 * before, atol=1e-6)


def test_accepts_text_encodings():
    _, layer = _layer()
    q, c = _inputs()
    with torch.no_grad():
        assert torch.equal(layer(q, TextEncoding(c=c, stage=2, source_tokens=None)), adapter_forward(q, c, layer))


def test_width_mismatch_names_the_site():
    _, layer = _layer()
    q, _ = _inputs()
    with pytest.raises(ValueError, match="'mid'"):
        adapter_forward(q, torch.zeros(4, 7), layer)
    with pytest.raises(ValueError, match="Non-finite"):
        adapter_forward(q, torch.full((4, 10), float("nan")), layer)


def test_frozen_branch_copies_are_independent_of_the_site():
    site, layer = _layer()
    assert not any(p.requires_grad for p in layer.tau_hat_q.parameters())
    with torch.no_grad():
        site.to_q.weight.add_(1.0)
    assert not torch.equal(site.to_q.weight, layer.tau_hat_q.weight)


def test_new_scale_receives_gradient():
    _, layer = _layer()
    q, c = _inputs()
    adapter_forward(q, c, layer).pow(2).sum().backward()
    assert layer.a2.grad is not None and float(layer.a2.grad) != 0.0
    assert layer.tau_hat_q.weight.grad is None


def test_adapter_covers_every_site_with_four_scalars():
    torch.manual_seed(0)
    adapter = init_adapter(DenoiserNet(channels=(8, 8, 8), cond_dim=6, attn_heads=2), lm_dim=10)
    assert adapter.site_names() == list(SITE_NAMES)
    assert adapter.scalar_count() == 20
    assert all(key.startswith("adapter.") for key in adapter.tensors())


def test_init_adapter_is_seeded_and_leaves_global_rng_alone():
    torch.manual_seed(0)
    denoiser = DenoiserNet(channels=(8, 8, 8), cond_dim=6, attn_heads=2)
    torch.manual_seed(42)
    expected_next = torch.rand(1)
    torch.manual_seed(42)
    first = init_adapter(denoiser, lm_dim=10, seed=3)
    assert torch.equal(torch.rand(1), expected_next)
    second = init_adapter(denoiser, lm_dim=10, seed=3)
    assert all(torch.equal(first.tensors()[key], value) for key, value in second.tensors().items())


def test_load_tensors_round_trip_and_missing_entries():
    torch.manual_seed(0)
    denoiser = DenoiserNet(channels=(8, 8, 8), cond_dim=6, attn_heads=2)
    source = init_adapter(denoiser, lm_dim=10, seed=1)
    target = init_adapter(denoiser, lm_dim=10, seed=2).load_tensors(source.tensors())
    assert all(torch.equal(source.tensors()[key], value) for key, value in target.tensors().items())
    partial = {key: value for key, value in source.tensors().items() if not key.startswith("adapter.up1.")}
    with pytest.raises(ValueError, match="up1"):
        init_adapter(denoiser, lm_dim=10).load_tensors(partial)


def test_scale_report_at_initialization(tmp_path):
    torch.manual_seed(0)
    adapter = init_adapter(DenoiserNet(channels=(8, 8, 8), cond_dim=6, attn_heads=2), lm_dim=10)
    report = scale_report(adapter)
    assert list(report.columns) == SCALE_COLUMNS
    assert list(report["site"]) == list(SITE_NAMES)
    assert (report["frozen_scale"] == 1.0).all()
    assert report["new_scale"].to_numpy() == pytest.approx([0.1] * 5)

    path = tmp_path / "scales.csv"
    write_scale_report(report, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "site,frozen_scale,new_scale"
    assert lines[1] == "down1,1,0.1"
    assert len(lines) == 6


def test_summarize_scales_groups_by_part():
    report = pd.DataFrame(
        {
            "site": ["down1", "down2", "mid", "up2", "up1"],
            "frozen_scale": [1.0, 3.0, 2.0, 0.5, 1.5],
            "new_scale": [0.1, 0.3, 0.2, 0.4, 0.6],
        }
    )
    summary = summarize_scales(report)
    assert list(summary.index) == ["down", "mid", "up"]
    assert summary.loc["down", "frozen_scale"] == pytest.approx(2.0)
    assert summary.loc["up", "new_scale"] == pytest.approx(0.5)


def test_check_frozen_reports_the_parameter():
    module = torch.nn.Linear(2, 2)
    module(torch.ones(1, 2)).sum().backward()
    with pytest.raises(RuntimeError, match="freezing violated: lm.weight"):
        check_frozen({"lm": module})


def test_training_moves_only_adapter_and_score_parameters():
    assert check_freezing()[0]


def test_trainable_set_is_exactly_alignment_projections_and_scales():
    adapter = init_adapter(mini_denoiser(seed=7), lm_dim=6, seed=8)
    names = set(trainable_parameters(adapter, mini_score(2)))
    expected = {f"adapter.{site}.{name}" for site in adapter.layers for name in ADAPTER_TRAINABLE}
    assert names == expected | {"score.g", "score.eta"}
    assert not any("tau_hat" in name for name in names)


def test_training_step_reports_updated_names():
    lm = set_frozen(mini_lm(seed=1, hidden=6))
    denoiser = set_frozen(mini_denoiser(seed=2))
    score = mini_score(lm.n_blocks, seed=3, eta=0.1)
    adapter = init_adapter(denoiser, lm_dim=6, seed=4)
    named = trainable_parameters(adapter, score)
    optimizer = torch.optim.AdamW(named.values(), lr=1e-3)
    images = gaussian_sample(RandomStream(5), (2, 3, 8, 8))
    ids = torch.tensor([[1, 3, 4, 2], [1, 5, 2, 0]])
    metrics = train_adapter_step(images, ids, lm, score, adapter, denoiser, optimizer, RandomStream(6), make_schedule(10))
    assert "score.g" in metrics["updated"]
    assert "adapter.mid.a2" in metrics["updated"]
    assert set(metrics["updated"]) <= set(named)
    assert count_parameters(named.values()) < count_parameters(denoiser) + count_parameters(adapter)
