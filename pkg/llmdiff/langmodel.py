from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from llmdiff.numerics import (
    causal_mask,
    multihead_attention,
    optimizer_step,
    resolve_dtype,
    self_only_mask,
)

PAD_ID = 0
MASK_MODES = ("causal", "self_only")


@dataclass(frozen=True)
class TokenSequence:
    """Token ids of one sentence, <bos> ... <eos> included."""

    ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if not self.ids:
            raise ValueError("A token sequence needs at least one token")

    def __len__(self):
        return len(self.ids)

    def __add__(self, other):
        return TokenSequence(self.ids + tuple(other.ids))

    def as_tensor(self):
        return torch.tensor(self.ids, dtype=torch.long)

    def padded(self, length, pad_id=PAD_ID):
        if len(self.ids) > length:
            raise ValueError(f"Sequence of length {len(self.ids)} does not fit in {length} slots")
        return TokenSequence(self.ids + (pad_id,) * (length - len(self.ids)))


def stack_sequences(sequences, length=None, pad_id=PAD_ID):
    """Right-pad sequences with <pad> into a LongTensor[B, length]."""
    length = length or max(len(seq) for seq in sequences)
    return torch.stack([seq.padded(length, pad_id).as_tensor() for seq in sequences])


@dataclass
class LMConfig:
    vocab_size: int
    hidden: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    max_len: int = 32
    dtype: str = "f32"

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise ValueError(f"hidden={self.hidden} must be divisible by n_heads={self.n_heads}")
        if self.n_blocks < 1:
            raise ValueError("The language model needs at least one block")

    @classmethod
    def from_section(cls, section, vocab_size):
        return cls(
            vocab_size=vocab_size,
            hidden=section.hidden,
            n_blocks=section.n_blocks,
            n_heads=section.n_heads,
            mlp_ratio=section.mlp_ratio,
            max_len=section.max_len,
            dtype=section.dtype,
        )


@dataclass
class BlockTrace:
    """
    Residual stream of one forward pass.

    states[t] holds x^t for t = 0..T (states[T] is the embedding output, states[0] the
    final state); deltas[t - 1] holds x^{t-1} - x^t, the update added by the block that
    realizes diffusion step t. Leading batch dimensions, when present, follow the t axis.
    """

    states: torch.Tensor
    deltas: torch.Tensor
    mask_mode: str

    @property
    def n_blocks(self):
        return self.deltas.shape[0]

    def state(self, t):
        if not 0 <= t <= self.n_blocks:
            raise ValueError(f"State index t={t} outside 0..{self.n_blocks}")
        return self.states[t]

    def delta(self, t):
        if not 1 <= t <= self.n_blocks:
            raise ValueError(f"Block index t={t} outside 1..{self.n_blocks}")
        return self.deltas[t - 1]


class Block(nn.Module):
    """Pre-norm transformer block returning only its residual update."""

    def __init__(self, config):
        super().__init__()
        hidden = config.hidden
        self.n_heads = config.n_heads
        self.ln1 = nn.LayerNorm(hidden)
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.ln2 = nn.LayerNorm(hidden)
        self.fc1 = nn.Linear(hidden, config.mlp_ratio * hidden)
        self.fc2 = nn.Linear(config.mlp_ratio * hidden, hidden)

    def forward(self, x, mask):
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        attn = self.proj(multihead_attention(q, k, v, self.n_heads, mask=mask))
        mlp = self.fc2(F.gelu(self.fc1(self.ln2(x + attn))))
        return attn + mlp


class LangModel(nn.Module):
    """
    Decoder-only causal transformer.

    blocks[0] realizes diffusion step t = T, blocks[-1] step t = 1; the output head is
    tied to the token embedding.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.hidden)
        self.pos_emb = nn.Embedding(config.max_len, config.hidden)
        self.blocks = nn.ModuleList([Block(config) for _ in range(config.n_blocks)])
        self.ln_f = nn.LayerNorm(config.hidden)
        self.apply(self._init_weights)
        self.to(resolve_dtype(config.dtype))

    @staticmethod
    def _init_weights(module):
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)

    @property
    def n_blocks(self):
        return self.config.n_blocks

    def _ids(self, tokens):
        ids = tokens.as_tensor() if isinstance(tokens, TokenSequence) else tokens
        if ids.shape[-1] > self.config.max_len:
            raise ValueError(f"sequence too long: {ids.shape[-1]} > {self.config.max_len}")
        if ids.numel() and (int(ids.max()) >= self.config.vocab_size or int(ids.min()) < 0):
            raise ValueError("unknown token id")
        return ids.to(self.tok_emb.weight.device)

    def embed(self, tokens):
        """ω(x): token + learned absolute position embedding; both x^T and c^T."""
        ids = self._ids(tokens)
        positions = torch.arange(ids.shape[-1], device=ids.device)
        return self.tok_emb(ids) + self.pos_emb(positions)

    def forward_trace(self, tokens, mask_mode="causal"):
        """Run every block and record x^T..x^0 together with the per-block deltas."""
        if mask_mode not in MASK_MODES:
            raise ValueError(f"Unknown mask mode '{mask_mode}'")
        x = self.embed(tokens)
        length = x.shape[-2]
        mask = causal_mask(length, x.device) if mask_mode == "causal" else self_only_mask(length, x.device)
        states, deltas = [x], []
        for block in self.blocks:
            delta = block(x, mask)
            x = x + delta
            states.append(x)
            deltas.append(delta)
        return BlockTrace(
            states=torch.stack(states[::-1]),
            deltas=torch.stack(deltas[::-1]),
            mask_mode=mask_mode,
        )

    def logits(self, final_state):
        return self.ln_f(final_state) @ self.tok_emb.weight.T

    def forward(self, ids):
        return self.logits(self.forward_trace(ids, "causal").state(0))

    @torch.no_grad()
    def greedy_continue(self, tokens, n_new, eos_id=None):
        """Append up to n_new argmax tokens, stopping early at eos_id."""
        ids = list(tokens.ids)
        for _ in range(n_new):
            if len(ids) >= self.config.max_len:
                break
            next_id = int(self(torch.tensor(ids))[-1].argmax())
            ids.append(next_id)
            if next_id == eos_id:
                break
        return TokenSequence(ids)


def lm_loss(model, batch, pad_id=PAD_ID):
    """Mean next-token cross-entropy over non-pad targets of a batch of TokenSequence."""
    for seq in batch:
        if len(seq) < 2:
            raise ValueError("Every training sequence needs at least two tokens")
    ids = stack_sequences(batch, pad_id=pad_id).to(model.tok_emb.weight.device)
    logits = model(ids)
    return F.cross_entropy(
        logits[:, :-1].reshape(-1, logits.shape[-1]),
        ids[:, 1:].reshape(-1),
        ignore_index=pad_id,
    )


def train_lm_step(model, optimizer, batch):
    """One AdamW step on lm_loss; returns {"loss", "grad_norm"}."""
    loss = lm_loss(model, batch)
    return optimizer_step(loss, optimizer, model.parameters(), "language model training")
