import pytest
import torch

from llmdiff.encoding import ScoreParams, extract_encoding, langevin_stages, sentence_score, word_score
from llmdiff.langmodel import TokenSequence, stack_sequences
from llmdiff.numerics import RandomStream, grad_check
from llmdiff.verify import mini_lm, mini_score, telescoped_encoding

TOKENS = TokenSequence([1, 4, 5, 6, 2])


def test_zero_score_scale_keeps_the_embedding(lm64):
    score = ScoreParams(lm64.n_blocks, dtype=torch.float64)
    with torch.no_grad():
        score.g.zero_()
    c = extract_encoding(TOKENS, lm64, score, RandomStream(0)).c
    assert torch.equal(c, lm64.embed(TOKENS))


def test_single_token_encoding_is_the_embedding(lm64, score64):
    token = TokenSequence([5])
    c = extract_encoding(token, lm64, score64, RandomStream(0)).c
    assert torch.equal(c, lm64.embed(token))


def test_deterministic_encoding_matches_telescoped_sum(lm64, score64):
    with torch.no_grad():
        c = extract_encoding(TOKENS, lm64, score64, RandomStream(0)).c
        reference = telescoped_encoding(lm64, TOKENS, score64.g)
    assert torch.allclose(c, reference, rtol=0, atol=1e-6)


def test_stages_run_from_embedding_to_block_one(lm64, score64):
    stages = list(langevin_stages(TOKENS, lm64, score64, RandomStream(0)))
    assert [s.stage for s in stages] == [0, 1, 2]
    causal = lm64.forward_trace(TOKENS, "causal")
    single = lm64.forward_trace(TOKENS, "self_only")
    step = stages[1].c - stages[0].c
    expected = sentence_score(causal, 2, score64) - word_score(single, 2, score64)
    assert torch.allclose(step, expected, atol=1e-12)


def test_scores_require_matching_trace_modes(lm64, score64):
    causal = lm64.forward_trace(TOKENS, "causal")
    with pytest.raises(ValueError):
        word_score(causal, 1, score64)


def test_block_count_mismatch_is_rejected(lm64):
    with pytest.raises(ValueError):
        extract_encoding(TOKENS, lm64, ScoreParams(lm64.n_blocks + 1, dtype=torch.float64), RandomStream(0))


def test_prefix_rows_do_not_see_the_suffix(lm64, score64):
    prefix = TokenSequence([1, 4, 5])
    short = extract_encoding(prefix, lm64, score64, RandomStream(0)).c
    long = extract_encoding(prefix + TokenSequence([6, 2]), lm64, score64, RandomStream(0)).c
    assert torch.allclose(short, long[:3], rtol=0, atol=1e-12)


def test_noise_is_reproducible_and_scaled_by_eta(lm64):
    noisy = mini_score(lm64.n_blocks, seed=1, eta=0.5)
    a = extract_encoding(TOKENS, lm64, noisy, RandomStream(9)).c
    b = extract_encoding(TOKENS, lm64, noisy, RandomStream(9)).c
    c = extract_encoding(TOKENS, lm64, noisy, RandomStream(10)).c
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_batched_rows_match_single_sequences(lm64):
    noisy = mini_score(lm64.n_blocks, seed=2, eta=0.2)
    sequences = [TokenSequence([1, 4, 5, 2]), TokenSequence([1, 6, 2, 0])]
    batched = extract_encoding(stack_sequences(sequences), lm64, noisy, [RandomStream(3), RandomStream(4)]).c
    for row, sequence in enumerate(sequences):
        alone = extract_encoding(sequence, lm64, noisy, RandomStream(3 + row)).c
        assert torch.allclose(batched[row], alone, atol=1e-12)


def test_divergence_aborts(lm64):
    score = ScoreParams(lm64.n_blocks, dtype=torch.float64)
    with torch.no_grad():
        score.g.fill_(float("inf"))
    with pytest.raises(RuntimeError, match="encoding diverged"):
        extract_encoding(TOKENS, lm64, score, RandomStream(0))


def test_lm_weights_get_no_gradient_but_scales_do():
    lm = mini_lm(seed=5)
    score = mini_score(lm.n_blocks, seed=5, eta=0.3)
    extract_encoding(TOKENS, lm, score, RandomStream(1)).c.pow(2).sum().backward()
    assert all(p.grad is None for p in lm.parameters())
    assert score.g.grad is not None and score.eta.grad is not None


def test_scale_gradients_match_finite_differences():
    lm = mini_lm(seed=6)
    score = mini_score(lm.n_blocks, seed=6, eta=0.4)
    weights = torch.linspace(-1, 1, len(TOKENS) * 8, dtype=torch.float64).reshape(len(TOKENS), 8)
    report = grad_check(
        lambda: (extract_encoding(TOKENS, lm, score, RandomStream(2)).c * weights).sum(), dict(score.named_parameters())
    )
    assert report.passed(1e-4), report.errors


def test_noise_variance_matches_the_accumulated_eta(lm64):
    score = ScoreParams(lm64.n_blocks, dtype=torch.float64)
    with torch.no_grad():
        score.g.zero_()
        score.eta.copy_(torch.tensor([0.3, 0.5], dtype=torch.float64))
    ids = stack_sequences([TOKENS] * 1000)
    with torch.no_grad():
        c = extract_encoding(ids, lm64, score, RandomStream(17)).c
        noise = c - lm64.embed(ids)
    expected = float((2.0 * score.eta**2).sum())
    assert float(noise.mean()) == pytest.approx(0.0, abs=0.02)
    assert float(noise.var()) == pytest.approx(expected, rel=0.05)
