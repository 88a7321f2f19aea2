import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from llmdiff.numerics import batch_gaussian, item_streams, multihead_attention, optimizer_step, uniform_ints

SITE_NAMES = ("down1", "down2", "mid", "up2", "up1")


@dataclass
class NoiseSchedule:
    betas: torch.Tensor
    alphas_bar: torch.Tensor

    @property
    def n_steps(self):
        return self.betas.shape[0]


def schedule_from_betas(betas):
    """Build a schedule from explicit betas (each strictly inside (0, 1))."""
    betas = torch.as_tensor(betas, dtype=torch.float64)
    if betas.dim() != 1 or betas.numel() == 0:
        raise ValueError("Betas must be a non-empty 1-D sequence")
    if not bool(((betas > 0) & (betas < 1)).all()):
        raise ValueError("Every beta must lie strictly between 0 and 1")
    return NoiseSchedule(betas=betas, alphas_bar=torch.cumprod(1.0 - betas, dim=0))


def make_schedule(n_steps=200, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule and its cumulative alphas_bar."""
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"Need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if n_steps < 1:
        raise ValueError("A schedule needs at least one step")
    return schedule_from_betas(torch.linspace(beta_start, beta_end, n_steps, dtype=torch.float64))


def _as_steps(step, batch, sched):
    steps = torch.as_tensor(step, dtype=torch.long).reshape(-1)
    if steps.numel() == 1 and batch > 1:
        steps = steps.expand(batch)
    if bool(((steps < 0) | (steps >= sched.n_steps)).any()):
        raise ValueError(f"Diffusion step out of range 0..{sched.n_steps - 1}")
    return steps


def q_sample(z0, step, eps, sched):
    """√ᾱ_t · z0 + √(1 − ᾱ_t) · eps, for a scalar step or one step per batch item."""
    if z0.shape != eps.shape:
        raise ValueError(f"Shape mismatch between z0 {tuple(z0.shape)} and eps {tuple(eps.shape)}")
    if torch.as_tensor(step).dim() == 0:
        _as_steps(step, 1, sched)
        alpha_bar = sched.alphas_bar[int(step)].to(z0.dtype)
        return alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * eps
    steps = _as_steps(step, z0.shape[0], sched)
    alpha_bar = sched.alphas_bar[steps].to(z0.dtype).reshape(-1, *([1] * (z0.dim() - 1)))
    return alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * eps


def timestep_embedding(steps, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = steps.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _groups(channels):
    return math.gcd(channels, 8)


class ResBlock(nn.Module):
    def __init__(self, in_channels, out_channels, time_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttentionSite(nn.Module):
    """
    One cross-attention site: GroupNorm -> attention over conditioning rows -> output
    projection -> residual add.

    Without an adapter layer the site attends with its own to_q/to_k/to_v. With one, the
    attention part is delegated to the layer (which keeps frozen copies of these
    projections) while to_out and the residual stay as they are.
    """

    def __init__(self, channels, cond_dim, n_heads):
        super().__init__()
        self.channels = channels
        self.cond_dim = cond_dim
        self.n_heads = n_heads if channels % n_heads == 0 else 1
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(cond_dim, channels)
        self.to_v = nn.Linear(cond_dim, channels)
        self.to_out = nn.Linear(channels, channels)

    def attend(self, h, cond):
        return multihead_attention(self.to_q(h), self.to_k(cond), self.to_v(cond), self.n_heads)

    def forward(self, x, cond, layer=None):
        batch, channels, height, width = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)
        f = self.attend(h, cond) if layer is None else layer(h, cond)
        out = self.to_out(f).transpose(1, 2).reshape(batch, channels, height, width)
        return x + out


class DenoiserNet(nn.Module):
    """
    Small ε-prediction U-Net: stem, two downsampling stages, bottleneck, two upsampling
    stages with skips. Every resolution level hosts one cross-attention site; the sites are
    reachable by name through `sites` in network order.
    """

    def __init__(self, in_channels=3, channels=(32, 64, 64), cond_dim=64, attn_heads=4):
        super().__init__()
        c0, c1, c2 = channels
        self.in_channels = in_channels
        self.time_dim = 4 * c0
        self.time_mlp = nn.Sequential(nn.Linear(c0, self.time_dim), nn.SiLU(), nn.Linear(self.time_dim, self.time_dim))
        self.stem = nn.Conv2d(in_channels, c0, 3, padding=1)

        self.down1 = ResBlock(c0, c0, self.time_dim)
        self.downsample1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.down2 = ResBlock(c1, c1, self.time_dim)
        self.downsample2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.mid = ResBlock(c2, c2, self.time_dim)
        self.upsample2 = nn.Conv2d(c2, c1, 3, padding=1)
        self.up2 = ResBlock(2 * c1, c1, self.time_dim)
        self.upsample1 = nn.Conv2d(c1, c0, 3, padding=1)
        self.up1 = ResBlock(2 * c0, c0, self.time_dim)

        site_channels = {"down1": c0, "down2": c1, "mid": c2, "up2": c1, "up1": c0}
        self.sites = nn.ModuleDict(
            {name: CrossAttentionSite(site_channels[name], cond_dim, attn_heads) for name in SITE_NAMES}
        )
        self.out_norm = nn.GroupNorm(_groups(c0), c0)
        self.out_conv = nn.Conv2d(c0, in_channels, 3, padding=1)
        self.base_channels = c0

    def site_names(self):
        return list(self.sites.keys())

    def forward(self, z, steps, cond, adapter=None):
        """
        Args:
        - z: noisy latents Tensor[B, C, S, S], S divisible by 4.
        - steps: LongTensor[B] of diffusion step indices.
        - cond: conditioning Tensor[B, L, H] (H_cond for the plain path, H_lm with an adapter).
        - adapter: optional AdapterState; its layers replace the attention of each site.
        """
        temb = self.time_mlp(timestep_embedding(steps, self.base_channels).to(z.dtype))

        def site(name, h):
            layer = adapter.layers[name] if adapter is not None else None
            return self.sites[name](h, cond, layer)

        h1 = site("down1", self.down1(self.stem(z), temb))
        h2 = site("down2", self.down2(self.downsample1(h1), temb))
        h = site("mid", self.mid(self.downsample2(h2), temb))
        h = self.upsample2(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = site("up2", self.up2(torch.cat([h, h2], dim=1), temb))
        h = self.upsample1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = site("up1", self.up1(torch.cat([h, h1], dim=1), temb))
        return self.out_conv(F.silu(self.out_norm(h)))


class MLPDenoiser(nn.Module):
    """ε-predictor for tiny unconditional latents (e.g. 2-D toy data stored as C x 1 x 1)."""

    def __init__(self, dim, hidden=128, time_dim=32):
        super().__init__()
        self.time_dim = time_dim
        self.net = nn.Sequential(
            nn.Linear(dim + time_dim, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
            nn.Linear(hidden, dim),
        )

    def forward(self, z, steps, cond=None, adapter=None):
        temb = timestep_embedding(steps, self.time_dim).to(z.dtype)
        return self.net(torch.cat([z.flatten(1), temb], dim=-1)).reshape(z.shape)


class PooledTextEncoder(nn.Module):
    """
    Baseline text encoder: trainable token + position embeddings, each row enriched with
    the mean over all rows of the sequence.
    """

    def __init__(self, vocab_size, cond_len, dim):
        super().__init__()
        self.tok_emb = nn.Embedding(vocab_size, dim)
        self.pos_emb = nn.Embedding(cond_len, dim)
        nn.init.normal_(self.tok_emb.weight, std=0.5)
        nn.init.normal_(self.pos_emb.weight, std=0.1)

    def forward(self, ids):
        rows = self.tok_emb(ids) + self.pos_emb(torch.arange(ids.shape[-1], device=ids.device))
        return rows + rows.mean(dim=-2, keepdim=True)


def denoise_loss(model, z0, cond, stream, sched, adapter=None):
    """
    ‖ε_θ(z_t, c) − ε‖² averaged over all coordinates.

    Each batch item draws its step t ~ U{0..N-1} and its ε from its own stream, so the
    loss does not depend on batch order.
    """
    streams = item_streams(stream, z0.shape[0])
    steps = torch.tensor([int(uniform_ints(s, sched.n_steps, None)) for s in streams], dtype=torch.long)
    eps = batch_gaussian(streams, z0.shape[1:], z0.dtype).to(z0.device)
    zt = q_sample(z0, steps, eps, sched)
    pred = model(zt, steps.to(z0.device), cond, adapter=adapter)
    loss = F.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        raise RuntimeError("Non-finite diffusion loss")
    return loss


def train_diffusion_step(model, optimizer, z0, cond, stream, sched, adapter=None, parameters=None):
    """One optimizer step on denoise_loss; returns {"loss", "grad_norm"}."""
    loss = denoise_loss(model, z0, cond, stream, sched, adapter=adapter)
    parameters = list(model.parameters()) if parameters is None else parameters
    return optimizer_step(loss, optimizer, parameters, "diffusion training")


@torch.no_grad()
def ddpm_sample(model, cond, stream, sched, shape, n_samples=None, guidance_weight=None, uncond=None, adapter=None):
    """
    Ancestral sampling from pure noise with σ_t² = β_t.

    Args:
    - cond: Tensor[B, L, H] conditioning, or None for unconditional models (then n_samples).
    - stream: RandomStream forked per sample, or a list with one stream per sample.
    - shape: per-sample latent shape (C, S, S).
    - guidance_weight: w; when set, ε̂ = (1 + w)·ε_cond − w·ε_uncond with `uncond` rows.
    """
    batch = cond.shape[0] if cond is not None else n_samples
    streams = item_streams(stream, batch)
    dtype = next(model.parameters()).dtype
    z = batch_gaussian(streams, shape, dtype)
    for i in reversed(range(sched.n_steps)):
        steps = torch.full((batch,), i, dtype=torch.long)
        eps = model(z, steps, cond, adapter=adapter)
        if guidance_weight is not None:
            if uncond is None:
                raise ValueError("Guidance needs unconditional conditioning rows")
            eps = (1.0 + guidance_weight) * eps - guidance_weight * model(z, steps, uncond, adapter=adapter)
        beta = sched.betas[i].to(dtype)
        alpha_bar = sched.alphas_bar[i].to(dtype)
        mean = (z - beta / (1.0 - alpha_bar).sqrt() * eps) / (1.0 - beta).sqrt()
        if i > 0:
            z = mean + beta.sqrt() * batch_gaussian(streams, shape, dtype)
        else:
            z = mean
    return z
