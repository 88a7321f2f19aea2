import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

MASK64 = (1 << 64) - 1

DTYPES = {"f32": torch.float32, "f64": torch.float64}


def resolve_dtype(name):
    """Map a config dtype name ('f32' / 'f64') to a torch dtype."""
    if name not in DTYPES:
        raise ValueError(f"Unknown dtype '{name}'. Choose one of {sorted(DTYPES)}.")
    return DTYPES[name]


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _mix(*values):
    h = 0
    for value in values:
        h = _splitmix64(h ^ (value & MASK64))
    return h


@dataclass
class RandomStream:
    """
    Counter-based random stream.

    Draw number `counter` of stream (seed, stream_id) is produced by a Philox
    generator keyed with (seed, stream_id) whose counter is positioned at
    `counter`, so a draw never depends on how many other streams were used
    before it or on which worker runs it.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def generator(self):
        """Return a numpy Generator for the current counter and advance the counter by one."""
        key = np.array([self.seed & MASK64, self.stream_id & MASK64], dtype=np.uint64)
        counter = np.array([0, self.counter & MASK64, 0, 0], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def fork(self, child):
        """Derive an independent child stream from (stream_id, counter, child); the parent is left untouched."""
        return RandomStream(seed=self.seed, stream_id=_mix(self.stream_id, self.counter, child), counter=0)

    def forks(self, n):
        return [self.fork(i) for i in range(n)]

    def at(self, counter):
        """Copy of this stream positioned at `counter`."""
        return replace(self, counter=counter)

    def copy(self):
        return replace(self)


def gaussian_sample(stream, shape, dtype=torch.float64):
    """Draw i.i.d. standard normals of the given shape and advance the stream."""
    values = stream.generator().standard_normal(size=tuple(shape))
    return torch.from_numpy(np.ascontiguousarray(values)).to(dtype)


def item_streams(stream, n):
    """One stream per batch item: either the given list or forks of a single stream."""
    if isinstance(stream, RandomStream):
        return stream.forks(n)
    streams = list(stream)
    if len(streams) != n:
        raise ValueError(f"Expected {n} per-item streams, got {len(streams)}")
    return streams


def batch_gaussian(streams, shape, dtype=torch.float64):
    """Stack one gaussian_sample of `shape` per stream into Tensor[len(streams), *shape]."""
    return torch.stack([gaussian_sample(s, shape, dtype) for s in streams])


def uniform_ints(stream, high, size):
    """Draw integers uniformly from [0, high) and advance the stream."""
    return stream.generator().integers(0, high, size=size)


def check_finite(tensor, what):
    if not torch.isfinite(tensor).all():
        raise RuntimeError(f"Non-finite values in {what}")
    return tensor


def set_frozen(module, frozen=True):
    for param in module.parameters():
        param.requires_grad_(not frozen)
    return module


def optimizer_step(loss, optimizer, parameters, what):
    """
    Backpropagate `loss`, apply one optimizer step and report the loss and gradient norm.

    Raises RuntimeError before touching the parameters when the loss is not finite.
    """
    if not torch.isfinite(loss):
        raise RuntimeError(f"Non-finite loss in {what}")
    parameters = [p for p in parameters if p.requires_grad]
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grads = [p.grad for p in parameters if p.grad is not None]
    grad_norm = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])) if grads else torch.zeros(())
    optimizer.step()
    return {"loss": float(loss), "grad_norm": float(grad_norm)}


def scaled_dot_attention(q, k, v, mask=None, return_weights=False):
    """
    Softmax attention over the allowed entries of q·kᵀ/√H.

    Args:
    - q: Tensor[..., Lq, H]
    - k, v: Tensor[..., Lk, H]
    - mask: optional boolean Tensor[Lq, Lk] (broadcastable); False entries are excluded.
    - return_weights: also return the attention weights.
    """
    hidden = q.shape[-1]
    if hidden <= 0:
        raise ValueError("Attention hidden size must be positive")
    logits = q @ k.transpose(-2, -1) / math.sqrt(hidden)
    if mask is not None:
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("degenerate attention row")
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def multihead_attention(q, k, v, n_heads, mask=None):
    """Split the last dimension into `n_heads` heads, attend per head and merge back."""
    if q.shape[-1] % n_heads != 0:
        raise ValueError(f"Hidden size {q.shape[-1]} not divisible by {n_heads} heads")

    def split(x):
        return x.unflatten(-1, (n_heads, -1)).transpose(-3, -2)

    out = scaled_dot_attention(split(q), split(k), split(v), mask=mask)
    return out.transpose(-3, -2).flatten(-2)


def causal_mask(length, device=None):
    return torch.tril(torch.ones(length, length, dtype=torch.bool, device=device))


def self_only_mask(length, device=None):
    return torch.eye(length, dtype=torch.bool, device=device)


# Entries whose analytic and numeric gradients are both below this are compared by absolute error.
ZERO_GRADIENT = 1e-6


def relative_error(analytic, numeric, floor=1e-8):
    """|a - n| / max(|a|, |n|, floor)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradReport:
    """
    Per-parameter max error between analytic and central-difference gradients.

    `errors` holds relative errors; `abs_errors` covers entries with a vanishing gradient,
    where central-difference round-off dominates any relative measure.
    """

    errors: dict
    step: float
    abs_errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def max_abs_error(self):
        return max(self.abs_errors.values(), default=0.0)

    def passed(self, tolerance=1e-4, abs_tolerance=1e-8):
        return self.max_error <= tolerance and self.max_abs_error <= abs_tolerance

    def worst(self):
        return max(self.errors.items(), key=lambda item: item[1], default=(None, 0.0))


def _checked_indices(numel, elements_per_param):
    if elements_per_param is None or elements_per_param >= numel:
        return range(numel)
    return sorted({int(i) for i in np.linspace(0, numel - 1, elements_per_param)})


def grad_check(loss_fn, params, step=1e-5, elements_per_param=None):
    """
    Compare reverse-mode gradients against central differences.

    Args:
    - loss_fn: zero-argument callable returning a scalar tensor. It must be deterministic,
      e.g. build its RandomStream inside the call.
    - params: dict name -> leaf tensor (requires_grad=True) that loss_fn reads.
    - step: finite-difference step.
    - elements_per_param: check only this many evenly spaced entries per tensor (None = all).

    Returns:
    - GradReport with the max relative error per parameter, plus the max absolute error over
      entries whose gradient vanishes.
    """
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise RuntimeError("Non-finite loss at the unperturbed parameters")
    tensors = list(params.values())
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)

    errors, abs_errors = {}, {}
    with torch.no_grad():
        for (name, param), grad in zip(params.items(), grads):
            analytic = torch.zeros_like(param) if grad is None else grad
            flat = param.view(-1)
            flat_grad = analytic.reshape(-1)
            worst, worst_abs = 0.0, 0.0
            for i in _checked_indices(flat.numel(), elements_per_param):
                original = flat[i].item()
                flat[i] = original + step
                f_plus = float(loss_fn())
                flat[i] = original - step
                f_minus = float(loss_fn())
                flat[i] = original
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise RuntimeError(f"Non-finite loss while perturbing parameter '{name}'")
                numeric = (f_plus - f_minus) / (2 * step)
                analytic_i = flat_grad[i].item()
                if max(abs(analytic_i), abs(numeric)) < ZERO_GRADIENT:
                    worst_abs = max(worst_abs, abs(analytic_i - numeric))
                else:
                    worst = max(worst, relative_error(analytic_i, numeric))
            errors[name] = worst
            abs_errors[name] = worst_abs
    return GradReport(errors=errors, step=step, abs_errors=abs_errors)
