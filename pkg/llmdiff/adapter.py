import copy

import pandas as pd
import torch
import torch.nn as nn

from llmdiff.diffusion import denoise_loss
from llmdiff.encoding import TextEncoding, extract_encoding
from llmdiff.numerics import multihead_attention, optimizer_step, set_frozen

SCALE_COLUMNS = ["site", "frozen_scale", "new_scale"]


def _site_part(site):
    for part in ("down", "mid", "up"):
        if site.startswith(part):
            return part
    return site


class AdapterLayerState(nn.Module):
    """
    Dual cross-attention for one denoiser site.

    The frozen branch reuses copies of the site's own q/k/v projections and reads φ(c); the
    new branch has its own projections and reads c directly. The branches are blended with
    a1·e^{b1} and a2·e^{b2}.
    """

    def __init__(self, site_name, site, lm_dim, init_a2=0.1, init_std=0.02):
        super().__init__()
        self.site_name = site_name
        self.channels = site.channels
        self.cond_dim = site.cond_dim
        self.lm_dim = lm_dim
        self.n_heads = site.n_heads
        dtype = site.to_q.weight.dtype

        self.tau_hat_q = set_frozen(copy.deepcopy(site.to_q))
        self.tau_hat_k = set_frozen(copy.deepcopy(site.to_k))
        self.tau_hat_v = set_frozen(copy.deepcopy(site.to_v))

        self.phi = nn.Linear(lm_dim, site.cond_dim, bias=False, dtype=dtype)
        with torch.no_grad():
            self.phi.weight.copy_(torch.eye(site.cond_dim, lm_dim, dtype=dtype))

        self.tau_q = nn.Linear(site.channels, site.channels, dtype=dtype)
        self.tau_k = nn.Linear(lm_dim, site.channels, dtype=dtype)
        self.tau_v = nn.Linear(lm_dim, site.channels, dtype=dtype)
        for layer in (self.tau_q, self.tau_k, self.tau_v):
            nn.init.normal_(layer.weight, std=init_std)
            nn.init.zeros_(layer.bias)

        self.a1 = nn.Parameter(torch.tensor(1.0, dtype=dtype))
        self.b1 = nn.Parameter(torch.tensor(0.0, dtype=dtype))
        self.a2 = nn.Parameter(torch.tensor(float(init_a2), dtype=dtype))
        self.b2 = nn.Parameter(torch.tensor(0.0, dtype=dtype))

    def frozen_scale(self):
        return self.a1 * torch.exp(self.b1)

    def new_scale(self):
        return self.a2 * torch.exp(self.b2)

    def forward(self, q, c):
        return adapter_forward(q, c, self)


def adapter_forward(q, c, layer):
    """
    f = attn(τ̂_q(q), τ̂_k(φ(c)), τ̂_v(φ(c)))·a1·e^{b1} + attn(τ_q(q), τ_k(c), τ_v(c))·a2·e^{b2}

    Args:
    - q: spatial features of the site, Tensor[..., Lq, C].
    - c: TextEncoding or Tensor[..., L, H_lm].
    - layer: AdapterLayerState of the site.

    Returns:
    - Tensor[..., Lq, C]
    """
    if isinstance(c, TextEncoding):
        c = c.c
    if c.shape[-1] != layer.lm_dim:
        raise ValueError(f"Site '{layer.site_name}' expects encodings of width {layer.lm_dim}, got {c.shape[-1]}")
    if q.shape[-1] != layer.channels:
        raise ValueError(f"Site '{layer.site_name}' expects {layer.channels} feature channels, got {q.shape[-1]}")
    if not torch.isfinite(c).all():
        raise ValueError(f"Non-finite text encoding at site '{layer.site_name}'")

    aligned = layer.phi(c)
    frozen = multihead_attention(layer.tau_hat_q(q), layer.tau_hat_k(aligned), layer.tau_hat_v(aligned), layer.n_heads)
    new = multihead_attention(layer.tau_q(q), layer.tau_k(c), layer.tau_v(c), layer.n_heads)
    return frozen * layer.frozen_scale() + new * layer.new_scale()


class AdapterState(nn.Module):
    """One AdapterLayerState per cross-attention site, keyed by site name in network order."""

    def __init__(self, layers):
        super().__init__()
        self.layers = nn.ModuleDict(layers)

    def site_names(self):
        return list(self.layers.keys())

    def scalar_count(self):
        return 4 * len(self.layers)

    def tensors(self):
        """Checkpoint entries namespaced 'adapter.<site>.<tensor>'."""
        return {f"adapter.{site}.{name}": tensor for site, layer in self.layers.items() for name, tensor in layer.state_dict().items()}

    def load_tensors(self, tensors):
        for site, layer in self.layers.items():
            prefix = f"adapter.{site}."
            state = {key[len(prefix):]: value for key, value in tensors.items() if key.startswith(prefix)}
            missing = set(layer.state_dict()) - set(state)
            if missing:
                raise ValueError(f"Checkpoint lacks adapter tensors for site '{site}': {sorted(missing)}")
            layer.load_state_dict(state)
        return self

    def trainable_named(self):
        return {
            f"adapter.{site}.{name}": param
            for site, layer in self.layers.items()
            for name, param in layer.named_parameters()
            if param.requires_grad
        }


def init_adapter(denoiser, lm_dim, init_a2=0.1, seed=0):
    """
    Build the adapter for every site of a trained denoiser.

    Args:
    - denoiser: DenoiserNet whose sites are copied.
    - lm_dim: hidden size of the language model (width of c).
    - init_a2: initial a2; 0 makes the adapted network reproduce the backbone fed φ(c).
    - seed: seed for the small random init of the new projections.

    Returns:
    - AdapterState
    """
    generator_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        layers = {name: AdapterLayerState(name, denoiser.sites[name], lm_dim, init_a2=init_a2) for name in denoiser.site_names()}
    finally:
        torch.random.set_rng_state(generator_state)
    return AdapterState(layers)


@torch.no_grad()
def scale_report(state):
    """Per-site effective weights (a1·e^{b1}, a2·e^{b2}) as a DataFrame in network order."""
    rows = [
        {"site": site, "frozen_scale": float(layer.frozen_scale()), "new_scale": float(layer.new_scale())}
        for site, layer in state.layers.items()
    ]
    return pd.DataFrame(rows, columns=SCALE_COLUMNS)


def write_scale_report(report, filepath):
    try:
        report.to_csv(filepath, index=False, float_format="%.6g")
    except Exception as e:
        raise RuntimeError(f"Failed to write scale report {filepath}: {e}")


def summarize_scales(report):
    """Mean frozen/new scale per U-Net part (down, mid, up)."""
    parts = report.assign(part=report["site"].map(_site_part))
    order = [part for part in ("down", "mid", "up") if part in set(parts["part"])]
    return parts.groupby("part")[["frozen_scale", "new_scale"]].mean().reindex(order)


def trainable_parameters(adapter, score_params):
    named = adapter.trainable_named()
    named.update({f"score.{name}": param for name, param in score_params.named_parameters()})
    return named


def check_frozen(modules):
    """Raise when any parameter of the given {prefix: module} map holds a nonzero gradient."""
    for prefix, module in modules.items():
        for name, param in module.named_parameters():
            if param.grad is not None and bool((param.grad != 0).any()):
                raise RuntimeError(f"freezing violated: {prefix}.{name}")


def adapter_loss(images, ids, lm, score_params, adapter, denoiser, stream, sched):
    encoding = extract_encoding(ids, lm, score_params, stream.fork(0))
    return denoise_loss(denoiser, images, encoding.c, stream.fork(1), sched, adapter=adapter)


def train_adapter_step(images, ids, lm, score_params, adapter, denoiser, optimizer, stream, sched):
    """
    One adapter step: Langevin text encodings of the captions, then the denoising loss through
    the adapted sites. Only φ, τ, a*, b*, g and eta may move.

    Returns:
    - dict with "loss", "grad_norm" and "updated" (sorted names of parameters that received a
      nonzero gradient).
    """
    loss = adapter_loss(images, ids, lm, score_params, adapter, denoiser, stream, sched)
    named = trainable_parameters(adapter, score_params)
    metrics = optimizer_step(loss, optimizer, named.values(), "adapter training")
    frozen_sites = {f"adapter.{site}": nn.ModuleList([layer.tau_hat_q, layer.tau_hat_k, layer.tau_hat_v]) for site, layer in adapter.layers.items()}
    check_frozen({"lm": lm, "denoiser": denoiser, **frozen_sites})
    metrics["updated"] = sorted(name for name, param in named.items() if param.grad is not None and bool((param.grad != 0).any()))
    return metrics


def count_parameters(module_or_params):
    params = module_or_params.parameters() if isinstance(module_or_params, nn.Module) else module_or_params
    return sum(p.numel() for p in params)

