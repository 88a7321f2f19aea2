"""
Self-checks runnable without any trained artifact: exact posterior identities on enumerable
chains, the Langevin sampler, gradient checks on miniature float64 networks and the
structural invariants of the encoding, diffusion and adapter modules.
"""

import math
import time

import pandas as pd
import torch

from llmdiff.adapter import AdapterLayerState, adapter_forward, adapter_loss, init_adapter, scale_report, train_adapter_step, trainable_parameters
from llmdiff.diffusion import CrossAttentionSite, DenoiserNet, denoise_loss, make_schedule, q_sample, schedule_from_betas
from llmdiff.encoding import ScoreParams, extract_encoding
from llmdiff.langmodel import LangModel, LMConfig, TokenSequence, lm_loss
from llmdiff.numerics import RandomStream, causal_mask, gaussian_sample, grad_check, self_only_mask, set_frozen
from llmdiff.oracle import (
    langevin_on_chain,
    posterior_bruteforce_context,
    posterior_encdec,
    posterior_ratio_context,
    random_chain,
    random_encdec_chain,
    standard_normal_score,
)

SUITES = ("oracle", "grad", "invariants")
GRAD_TOLERANCE = 1e-4
ADAPTER_TRAINABLE = ("phi.weight", "tau_q.weight", "tau_q.bias", "tau_k.weight", "tau_k.bias", "tau_v.weight", "tau_v.bias", "a1", "b1", "a2", "b2")


# ---------------------------------------------------------------------------
# miniature float64 models


def _reinit(module, seed, std=0.3):
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in module.parameters():
            param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype) * std)
    return module


def mini_lm(seed=0, n_blocks=2, hidden=8, vocab_size=7, max_len=8, dtype="f64"):
    config = LMConfig(vocab_size=vocab_size, hidden=hidden, n_blocks=n_blocks, n_heads=2, mlp_ratio=2, max_len=max_len, dtype=dtype)
    torch.manual_seed(seed)
    return _reinit(LangModel(config), seed)


def mini_denoiser(seed=0, cond_dim=4, width=4):
    torch.manual_seed(seed)
    model = DenoiserNet(in_channels=3, channels=(width, width, width), cond_dim=cond_dim, attn_heads=1).to(torch.float64)
    return _reinit(model, seed, std=0.2)


def mini_score(n_blocks, seed=0, eta=0.0):
    score = ScoreParams(n_blocks, dtype=torch.float64)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        score.g.copy_(0.5 + torch.rand(n_blocks, generator=generator, dtype=torch.float64))
        score.eta.fill_(eta)
    return score


def _random_ids(seed, batch, length, vocab_size):
    generator = torch.Generator().manual_seed(seed)
    return torch.randint(0, vocab_size, (batch, length), generator=generator)


# ---------------------------------------------------------------------------
# oracle suite


def check_context_identity(n_chains=100, seed=0):
    worst = 0.0
    stream = RandomStream(seed, stream_id=101)
    for i in range(n_chains):
        rng = stream.fork(i).fork(0).generator()
        K, D = (int(v) for v in rng.integers(2, 4, size=2))
        T = int(rng.integers(1, 3))
        chain = random_chain(stream.fork(i).fork(1), K, D, T)
        t = int(rng.integers(1, T + 1))
        d = int(rng.integers(1, D))
        x_t_d, x_tm1_d = (int(v) for v in rng.integers(0, K, size=2))
        brute = posterior_bruteforce_context(chain, t, d, x_t_d, x_tm1_d)
        ratio = posterior_ratio_context(chain, t, d, x_t_d, x_tm1_d)
        worst = max(worst, float(abs(brute - ratio).max()))
    return worst <= 1e-10, f"{n_chains} chains, sup-norm gap {worst:.2e}"


def check_encdec_identity(n_chains=100, seed=0):
    stream = RandomStream(seed, stream_id=102)
    for i in range(n_chains):
        rng = stream.fork(i).fork(0).generator()
        K, D, M = (int(v) for v in rng.integers(2, 4, size=3))
        T = int(rng.integers(1, 3))
        chain = random_encdec_chain(stream.fork(i).fork(1), K, D, T, M)
        t = int(rng.integers(1, T + 1))
        d = int(rng.integers(0, D))
        x_t_d, x_tm1_d = (int(v) for v in rng.integers(0, K, size=2))
        posterior = posterior_encdec(chain, t, d, x_t_d, x_tm1_d)
        if abs(posterior.sum() - 1.0) > 1e-12:
            return False, f"chain {i}: posterior sums to {posterior.sum()}"
    return True, f"{n_chains} chains within 1e-10"


def check_langevin(n_chains=64, n_steps=100_000, step=0.01, seed=0):
    stats = langevin_on_chain(standard_normal_score, [0.0] * n_chains, step, n_steps, RandomStream(seed, 103), burn_in=1000)
    passed = abs(stats.mean) <= 0.05 and abs(stats.var - 1.0) <= 0.1
    return passed, f"mean {stats.mean:+.4f}, var {stats.var:.4f}"


# ---------------------------------------------------------------------------
# gradient suite


def _grad_result(report):
    detail = f"max rel. err {report.max_error:.2e} ({report.worst()[0]}), max abs. err {report.max_abs_error:.1e}"
    return report.passed(GRAD_TOLERANCE), detail


def check_grad_lm_block():
    model = mini_lm()
    batch = [TokenSequence(row) for row in _random_ids(1, 3, 6, 7).tolist()]
    params = {f"blocks.0.{name}": p for name, p in model.blocks[0].named_parameters()}
    report = grad_check(lambda: lm_loss(model, batch, pad_id=-1), params, elements_per_param=4)
    return _grad_result(report)


def check_grad_denoiser():
    model = mini_denoiser()
    z0 = gaussian_sample(RandomStream(2), (2, 3, 8, 8))
    cond = gaussian_sample(RandomStream(3), (2, 3, 4))
    sched = make_schedule(10)
    params = dict(model.named_parameters())
    report = grad_check(lambda: denoise_loss(model, z0, cond, RandomStream(4), sched), params, elements_per_param=2)
    return _grad_result(report)


def check_grad_adapter_site():
    torch.manual_seed(5)
    site = _reinit(CrossAttentionSite(4, 4, 1).to(torch.float64), 5)
    layer = _reinit(AdapterLayerState("site", site, lm_dim=6), 6)
    with torch.no_grad():
        layer.a1.fill_(1.0)
        layer.b1.fill_(0.0)
        layer.a2.fill_(0.1)
        layer.b2.fill_(0.0)
    q = gaussian_sample(RandomStream(7), (2, 5, 4))
    c = gaussian_sample(RandomStream(8), (2, 3, 6))
    weights = gaussian_sample(RandomStream(9), (2, 5, 4))
    params = {name: p for name, p in layer.named_parameters() if p.requires_grad}
    report = grad_check(lambda: (adapter_forward(q, c, layer) * weights).sum(), params)
    return _grad_result(report)


def check_grad_full_path():
    lm = set_frozen(mini_lm(n_blocks=2, hidden=6, seed=10))
    denoiser = set_frozen(mini_denoiser(seed=11))
    score = mini_score(lm.n_blocks, seed=12, eta=0.3)
    adapter = init_adapter(denoiser, lm_dim=6, init_a2=0.1, seed=13)
    images = gaussian_sample(RandomStream(14), (2, 3, 8, 8))
    ids = _random_ids(15, 2, 4, 7)
    sched = make_schedule(10)
    params = trainable_parameters(adapter, score)
    report = grad_check(
        lambda: adapter_loss(images, ids, lm, score, adapter, denoiser, RandomStream(16), sched), params, elements_per_param=2
    )
    return _grad_result(report)


# ---------------------------------------------------------------------------
# invariants suite


def check_causal_invariance():
    lm = mini_lm(seed=20)
    score = mini_score(lm.n_blocks, seed=21)
    prefix = TokenSequence([1, 4, 5, 6])
    full = prefix + TokenSequence([2, 3])
    n = len(prefix)
    gap = 0.0
    for mode in ("causal", "self_only"):
        short, long = lm.forward_trace(prefix, mode), lm.forward_trace(full, mode)
        gap = max(gap, float((short.states - long.states[:, :n]).abs().max()))
    c_short = extract_encoding(prefix, lm, score, RandomStream(22)).c
    c_long = extract_encoding(full, lm, score, RandomStream(22)).c
    gap = max(gap, float((c_short - c_long[:n]).abs().max()))
    return gap <= 1e-12, f"max prefix change {gap:.2e}"


def check_degenerate_encodings():
    lm = mini_lm(seed=30)
    tokens = TokenSequence([1, 5, 4, 2])
    zero_g = mini_score(lm.n_blocks)
    with torch.no_grad():
        zero_g.g.zero_()
    with torch.no_grad():
        embedded = lm.embed(tokens)
        single = lm.embed(TokenSequence([5]))
        g0 = extract_encoding(tokens, lm, zero_g, RandomStream(31)).c
        d1 = extract_encoding(TokenSequence([5]), lm, mini_score(lm.n_blocks, seed=32), RandomStream(31)).c
    passed = torch.equal(g0, embedded) and torch.equal(d1, single)
    return passed, "g=0 and D=1 leave c = embedding" if passed else "degenerate encodings moved away from the embedding"


def telescoped_encoding(lm, tokens, g):
    """ω(x) + Σ_t g_t (causal delta_t − self-only delta_t), recomputed block by block."""
    ids = tokens.as_tensor()
    length = ids.shape[0]
    x0 = lm.embed(ids)
    total = x0.clone()
    for mask, sign in ((causal_mask(length), 1.0), (self_only_mask(length), -1.0)):
        x = x0
        for index, block in enumerate(lm.blocks):
            delta = block(x, mask)
            x = x + delta
            t = lm.n_blocks - index
            total = total + sign * g[t - 1] * delta
    return total


def check_telescoped_sum():
    lm = mini_lm(seed=40, n_blocks=3)
    score = mini_score(lm.n_blocks, seed=41)
    tokens = TokenSequence([1, 3, 6, 4, 2])
    with torch.no_grad():
        c = extract_encoding(tokens, lm, score, RandomStream(42)).c
        reference = telescoped_encoding(lm, tokens, score.g)
    gap = float((c - reference).abs().max())
    return gap <= 1e-6, f"max gap {gap:.2e}"


def check_adapter_init_equivalence(n_trials=100):
    torch.manual_seed(50)
    site = CrossAttentionSite(8, 6, 2)
    layer = AdapterLayerState("site", site, lm_dim=10, init_a2=0.0)
    worst = 0.0
    with torch.no_grad():
        for trial in range(n_trials):
            q = gaussian_sample(RandomStream(51, trial), (5, 8), torch.float32)
            c = gaussian_sample(RandomStream(52, trial), (4, 10), torch.float32)
            got = adapter_forward(q, c, layer)
            want = site.attend(q, layer.phi(c))
            worst = max(worst, float((got - want).norm() / want.norm().clamp(min=1e-12)))
    return worst <= 1e-6, f"{n_trials} trials, max rel. gap {worst:.2e}"


def check_network_init_equivalence():
    torch.manual_seed(53)
    denoiser = DenoiserNet(channels=(8, 8, 8), cond_dim=6, attn_heads=2)
    adapter = init_adapter(denoiser, lm_dim=10, init_a2=0.0)
    z = gaussian_sample(RandomStream(54), (2, 3, 8, 8), torch.float32)
    c = gaussian_sample(RandomStream(55), (2, 4, 10), torch.float32)
    steps = torch.tensor([3, 7])
    with torch.no_grad():
        got = denoiser(z, steps, c, adapter=adapter)
        want = denoiser(z, steps, adapter.layers["mid"].phi(c))
    gap = float((got - want).abs().max())
    return gap <= 1e-6, f"max gap {gap:.2e}"


def check_exponential_reparameterization():
    torch.manual_seed(60)
    site = CrossAttentionSite(4, 4, 1)
    layer = AdapterLayerState("site", site, lm_dim=4)
    q = gaussian_sample(RandomStream(61), (3, 4), torch.float32)
    c = gaussian_sample(RandomStream(62), (2, 4), torch.float32)
    delta = torch.tensor(math.log(2.0))
    with torch.no_grad():
        layer.b1.copy_(delta)
        shifted = adapter_forward(q, c, layer)
        layer.b1.fill_(0.0)
        layer.a1.copy_(torch.exp(delta))
        rescaled = adapter_forward(q, c, layer)
    passed = torch.equal(shifted, rescaled)
    return passed, "shifting b1 by ln 2 equals scaling a1 by e^{ln 2}" if passed else f"gap {float((shifted - rescaled).abs().max()):.2e}"


def check_q_sample_marginal(n_draws=10_000):
    sched = make_schedule()
    step = 100
    z0 = torch.ones(1, dtype=torch.float64)
    eps = gaussian_sample(RandomStream(70), (n_draws, 1))
    samples = q_sample(z0.expand(n_draws, 1), step, eps, sched)
    alpha_bar = float(sched.alphas_bar[step])
    mean_ok = abs(float(samples.mean()) - math.sqrt(alpha_bar)) <= 0.05 * math.sqrt(alpha_bar)
    var_ok = abs(float(samples.var()) - (1.0 - alpha_bar)) <= 0.05 * (1.0 - alpha_bar)
    return mean_ok and var_ok, f"mean {float(samples.mean()):.4f}, var {float(samples.var()):.4f}"


def check_schedule():
    sched = schedule_from_betas([0.5, 0.5])
    exact = torch.allclose(sched.alphas_bar, torch.tensor([0.5, 0.25], dtype=torch.float64), rtol=0, atol=1e-15)
    default = make_schedule()
    decreasing = bool((default.alphas_bar[1:] < default.alphas_bar[:-1]).all())
    return exact and decreasing, f"{default.n_steps} steps, alphas_bar[-1] = {float(default.alphas_bar[-1]):.4f}"


def check_denoiser_shapes():
    torch.manual_seed(80)
    denoiser = DenoiserNet(channels=(8, 8, 8), cond_dim=6, attn_heads=2)
    shapes = []
    for size in (8, 16):
        z = torch.zeros(2, 3, size, size)
        with torch.no_grad():
            out = denoiser(z, torch.tensor([0, 5]), torch.zeros(2, 4, 6))
        shapes.append(tuple(out.shape) == tuple(z.shape))
    return all(shapes), "output shape equals input shape for S in {8, 16}"


def check_scale_init():
    torch.manual_seed(90)
    adapter = init_adapter(DenoiserNet(channels=(8, 8, 8), cond_dim=6, attn_heads=2), lm_dim=10)
    report = scale_report(adapter)
    passed = len(report) == 5 and bool((report["frozen_scale"] == 1.0).all()) and bool(((report["new_scale"] - 0.1).abs() < 1e-7).all())
    return passed, f"{len(report)} sites at (1.0, 0.1)"


def check_freezing(n_steps=100):
    lm = set_frozen(mini_lm(seed=100, hidden=6))
    denoiser = set_frozen(mini_denoiser(seed=101))
    score = mini_score(lm.n_blocks, seed=102)
    adapter = init_adapter(denoiser, lm_dim=6, seed=103)
    trainable = trainable_parameters(adapter, score)
    expected = {f"adapter.{site}.{name}" for site in adapter.layers for name in ADAPTER_TRAINABLE} | {"score.g", "score.eta"}
    frozen = list(lm.named_parameters()) + list(denoiser.named_parameters())
    frozen += [(f"adapter.{name}", p) for name, p in adapter.named_parameters() if not p.requires_grad]
    frozen_before = {name: p.detach().clone() for name, p in frozen}
    optimizer = torch.optim.AdamW(trainable.values(), lr=1e-2)
    images = gaussian_sample(RandomStream(104), (2, 3, 8, 8))
    ids = _random_ids(105, 2, 4, 7)
    updated = set()
    for step in range(n_steps):
        metrics = train_adapter_step(images, ids, lm, score, adapter, denoiser, optimizer, RandomStream(106).at(step), make_schedule(10))
        updated.update(metrics["updated"])
    unchanged = all(torch.equal(frozen_before[name], p) for name, p in frozen)
    passed = unchanged and set(trainable) == expected and updated == expected
    return passed, f"{len(updated)} of {len(expected)} trainable tensors updated over {n_steps} steps, frozen unchanged={unchanged}"


CHECKS = {
    "oracle": [
        ("context posterior identity", check_context_identity),
        ("encoder-decoder posterior identity", check_encdec_identity),
        ("langevin stationary moments", check_langevin),
    ],
    "grad": [
        ("lm block", check_grad_lm_block),
        ("denoiser", check_grad_denoiser),
        ("adapter site", check_grad_adapter_site),
        ("encoding through diffusion loss", check_grad_full_path),
    ],
    "invariants": [
        ("causal invariance", check_causal_invariance),
        ("degenerate encodings", check_degenerate_encodings),
        ("telescoped encoding", check_telescoped_sum),
        ("adapter init equivalence", check_adapter_init_equivalence),
        ("network init equivalence", check_network_init_equivalence),
        ("exponential reparameterization", check_exponential_reparameterization),
        ("q_sample marginal", check_q_sample_marginal),
        ("noise schedule", check_schedule),
        ("denoiser shapes", check_denoiser_shapes),
        ("scale report init", check_scale_init),
        ("freezing contract", check_freezing),
    ],
}


def run_suite(suite="all"):
    """
    Run one suite (or all) and return a DataFrame with one row per check.

    A check that raises is reported as failed with the exception text as detail.
    """
    suites = SUITES if suite == "all" else (suite,)
    for name in suites:
        if name not in CHECKS:
            raise ValueError(f"Unknown suite '{name}'. Choose one of {', '.join(SUITES)} or all.")
    rows = []
    for name in suites:
        for check_name, check in CHECKS[name]:
            start = time.perf_counter()
            try:
                passed, detail = check()
            except Exception as e:
                passed, detail = False, f"{type(e).__name__}: {e}"
            rows.append(
                {"suite": name, "check": check_name, "passed": bool(passed), "seconds": round(time.perf_counter() - start, 2), "detail": detail}
            )
    return pd.DataFrame(rows, columns=["suite", "check", "passed", "seconds", "detail"])


def print_summary(table):
    with pd.option_context("display.max_colwidth", 80, "display.width", 160):
        print(table.to_string(index=False))
    print(f"{int(table['passed'].sum())}/{len(table)} checks passed")
