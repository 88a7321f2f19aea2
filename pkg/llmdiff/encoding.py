import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from llmdiff.numerics import batch_gaussian, gaussian_sample, item_streams


class ScoreParams(nn.Module):
    """
    Per-block score scale g(t) and noise scale eta(t), h(t) = eta(t)^2.

    Entry t - 1 belongs to block t. At initialization g = 1 and eta = 0, so extraction is
    deterministic and equals the accumulated sentence-minus-word delta.
    """

    def __init__(self, n_blocks, dtype=torch.float32):
        super().__init__()
        self.g = nn.Parameter(torch.ones(n_blocks, dtype=dtype))
        self.eta = nn.Parameter(torch.zeros(n_blocks, dtype=dtype))

    @property
    def n_blocks(self):
        return self.g.shape[0]


@dataclass
class TextEncoding:
    c: torch.Tensor
    stage: int
    source_tokens: object


def _require_mode(trace, mode):
    if trace.mask_mode != mode:
        raise ValueError(f"Expected a {mode} trace, got {trace.mask_mode}")


def sentence_score(trace_causal, t, params):
    """g(t) times the block-t delta computed with the full causal context."""
    _require_mode(trace_causal, "causal")
    return params.g[t - 1] * trace_causal.delta(t)


def word_score(trace_self, t, params):
    """g(t) times the block-t delta computed with every token attending only to itself."""
    _require_mode(trace_self, "self_only")
    return params.g[t - 1] * trace_self.delta(t)


def langevin_stages(tokens, model, params, stream):
    """
    Yield the TextEncoding after every Langevin step, stage 0 (c = ω(x)) through stage T.

    Both traces are computed once from the original tokens; only c accumulates
    updates. LM weights receive no gradient, g and eta do.

    Args:
    - tokens: TokenSequence, or LongTensor[B, D] of padded ids.
    - model: LangModel.
    - params: ScoreParams with one entry per block.
    - stream: RandomStream (forked per batch row for batched input) or a list of per-row streams.
    """
    if params.n_blocks != model.n_blocks:
        raise ValueError(f"Score params cover {params.n_blocks} blocks, model has {model.n_blocks}")
    with torch.no_grad():
        causal = model.forward_trace(tokens, "causal")
        single = model.forward_trace(tokens, "self_only")
        c = model.embed(tokens)
    yield TextEncoding(c=c, stage=0, source_tokens=tokens)

    rows = None if c.dim() == 2 else item_streams(stream, c.shape[0])
    for stage, t in enumerate(range(model.n_blocks, 0, -1), start=1):
        score = sentence_score(causal, t, params) - word_score(single, t, params)
        if rows is None:
            eps = gaussian_sample(stream, c.shape, c.dtype)
        else:
            eps = batch_gaussian(rows, c.shape[1:], c.dtype)
        c = c + score + math.sqrt(2.0) * params.eta[t - 1] * eps.to(c.device)
        if not torch.isfinite(c).all():
            raise RuntimeError("encoding diverged")
        yield TextEncoding(c=c, stage=stage, source_tokens=tokens)


def extract_encoding(tokens, model, params, stream):
    """Text encoding from the decoder-only LM: the last Langevin stage."""
    encoding = None
    for encoding in langevin_stages(tokens, model, params, stream):
        pass
    return encoding
