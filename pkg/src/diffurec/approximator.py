"""Transformer approximator that reconstructs the target representation.

Each history item embedding is conditioned on the current latent ``x`` and
the step embedding ``d_s`` (either by a scaled sum or by cross-attention),
the conditioned sequence runs through a post-norm Transformer encoder, and
the last position is read out as the estimate of x_0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .diffusion import ConfigError

CONDITIONING_MODES = ("sum", "cross_attention")
ATTENTION_MASKS = ("bidirectional", "causal")


@dataclass(frozen=True)
class ConditioningConfig:
    mode: str = "sum"
    delta: float = 0.001
    lambda_std: float = 0.001
    heads: int = 4

    def validate(self, d: int) -> None:
        if self.mode not in CONDITIONING_MODES:
            raise ConfigError(f"conditioning mode must be one of {CONDITIONING_MODES}")
        if self.lambda_std < 0:
            raise ConfigError("lambda_std must be nonnegative")
        if self.heads < 1 or d % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d={d}")


@dataclass(frozen=True)
class TransformerConfig:
    d: int = 128
    blocks: int = 4
    heads: int = 4
    ffn_dim: int | None = None  # defaults to 4 * d
    dropout_attn_block: float = 0.1
    dropout_item_embedding: float = 0.3
    max_len: int = 100
    attention_mask: str = "bidirectional"

    @property
    def ffn(self) -> int:
        return self.ffn_dim if self.ffn_dim else 4 * self.d

    def validate(self) -> None:
        if self.blocks < 1:
            raise ConfigError("blocks must be >= 1")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d={self.d}")
        for p in (self.dropout_attn_block, self.dropout_item_embedding):
            if not 0.0 <= p < 1.0:
                raise ConfigError("dropout rates must lie in [0, 1)")
        if self.attention_mask not in ATTENTION_MASKS:
            raise ConfigError(f"attention_mask must be one of {ATTENTION_MASKS}")


def sample_lambda(shape, cfg: ConditioningConfig, generator: torch.Generator | None = None,
                  dtype=torch.float32, device=None) -> torch.Tensor:
    """Per-position conditioning scales, i.i.d. N(delta, lambda_std^2)."""
    if cfg.lambda_std < 0:
        raise ConfigError("lambda_std must be nonnegative")
    z = torch.randn(tuple(shape), generator=generator, dtype=torch.float64)
    return (cfg.delta + cfg.lambda_std * z).to(dtype=dtype, device=device)


def _conditioning_token(x, d_s, lam):
    # lam: (..., n) scalar per position, broadcast over the d coordinates
    if x.shape != d_s.shape:
        raise ValueError(f"latent {tuple(x.shape)} and step embedding {tuple(d_s.shape)} differ")
    return lam.unsqueeze(-1) * (x + d_s).unsqueeze(-2)


def condition_sum(e_seq, x, d_s, lam):
    """z_i = e_i + lam_i * (x + d_s)."""
    c = _conditioning_token(x, d_s, lam)
    if c.shape != e_seq.shape:
        raise ValueError(f"conditioning shape {tuple(c.shape)} does not match {tuple(e_seq.shape)}")
    return e_seq + c


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d % heads:
            raise ConfigError(f"heads={heads} must divide d={d}")
        self.heads = heads
        self.d_head = d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def _split(self, t):
        b, n, _ = t.shape
        return t.view(b, n, self.heads, self.d_head).transpose(1, 2)

    def forward(self, query, key, value, key_mask=None, causal=False):
        """Return (output, attention weights).

        ``key_mask`` is (batch, n_keys) with True at real positions; masked keys
        get exactly zero weight.
        """
        q = self._split(self.q(query))
        k = self._split(self.k(key))
        v = self._split(self.v(value))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        # finite fill keeps fully masked (padding) query rows NaN-free
        neg = torch.finfo(scores.dtype).min
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], neg)
        if causal:
            nq, nk = scores.shape[-2:]
            future = torch.ones(nq, nk, dtype=torch.bool, device=scores.device).triu(1)
            scores = scores.masked_fill(future, neg)
        weights = torch.softmax(scores, dim=-1)
        out = self.dropout(weights) @ v
        b, _, n, _ = out.shape
        out = out.transpose(1, 2).reshape(b, n, self.heads * self.d_head)
        return self.o(out), weights


def condition_cross_attention(e_seq, x, d_s, lam, attn: MultiHeadAttention, return_weights=False):
    """z_i = e_i + MHA(query=e_i, key=value=lam_i * (x + d_s)).

    Each query position sees exactly one key, its own conditioning token.
    """
    c = _conditioning_token(x, d_s, lam)
    if c.shape != e_seq.shape:
        raise ValueError(f"conditioning shape {tuple(c.shape)} does not match {tuple(e_seq.shape)}")
    lead = e_seq.shape[:-1]
    d = e_seq.shape[-1]
    q = e_seq.reshape(-1, 1, d)
    kv = c.reshape(-1, 1, d)
    out, weights = attn(q, kv, kv)
    z = e_seq + out.reshape(*lead, d)
    if return_weights:
        return z, weights.reshape(*lead, attn.heads)
    return z


class TransformerBlock(nn.Module):
    """Self-attention -> add & norm -> feed-forward -> add & norm."""

    def __init__(self, d: int, heads: int, ffn: int, dropout: float):
        super().__init__()
        self.attn = MultiHeadAttention(d, heads, dropout)
        self.norm1 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, ffn)
        self.ff2 = nn.Linear(ffn, d)
        self.norm2 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, h, mask, causal=False):
        a, weights = self.attn(h, h, h, key_mask=mask, causal=causal)
        h = self.norm1(h + self.dropout(a))
        f = self.ff2(self.dropout(F.relu(self.ff1(h))))
        return self.norm2(h + self.dropout(f)), weights


class Approximator(nn.Module):
    def __init__(self, num_items: int, T: int, tcfg: TransformerConfig, ccfg: ConditioningConfig):
        super().__init__()
        tcfg.validate()
        ccfg.validate(tcfg.d)
        self.num_items = num_items
        self.T = T
        self.tcfg = tcfg
        self.ccfg = ccfg
        d = tcfg.d
        self.item_emb = nn.Embedding(num_items + 1, d, padding_idx=0)
        self.step_emb = nn.Embedding(T + 1, d)
        self.pos_emb = nn.Embedding(tcfg.max_len, d)
        self.item_dropout = nn.Dropout(tcfg.dropout_item_embedding)
        self.cross = MultiHeadAttention(d, ccfg.heads) if ccfg.mode == "cross_attention" else None
        self.blocks = nn.ModuleList(
            TransformerBlock(d, tcfg.heads, tcfg.ffn, tcfg.dropout_attn_block)
            for _ in range(tcfg.blocks)
        )

    @property
    def d(self) -> int:
        return self.tcfg.d

    def condition(self, e_seq, x, d_s, lam):
        if self.cross is None:
            return condition_sum(e_seq, x, d_s, lam)
        return condition_cross_attention(e_seq, x, d_s, lam, self.cross)

    def encode(self, z, mask, return_weights=False):
        """Positional embeddings plus the block stack; output has the shape of ``z``."""
        n = z.shape[-2]
        if n > self.tcfg.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.tcfg.max_len}")
        pos = self.pos_emb.weight[self.tcfg.max_len - n:]
        h = z + pos
        causal = self.tcfg.attention_mask == "causal"
        all_weights = []
        for block in self.blocks:
            h, w = block(h, mask, causal=causal)
            all_weights.append(w)
        return (h, all_weights) if return_weights else h

    def forward(self, items, x, s, lam=None, generator=None):
        """Estimate x_0 for left-padded histories ``items`` (batch, n).

        ``x`` is the latent (batch, d) and ``s`` the step index per row.
        """
        if items.ndim != 2:
            raise ValueError("items must be (batch, n)")
        mask = items != 0
        if not bool(mask[:, -1].all()):
            raise ValueError("every history must end in a real item (left padding)")
        if not torch.is_tensor(s):
            s = torch.full((items.shape[0],), int(s), dtype=torch.long)
        if int(s.min()) < 1 or int(s.max()) > self.T:
            raise IndexError(f"step index out of range 1..{self.T}")
        e = self.item_dropout(self.item_emb(items))
        d_s = self.step_emb(s)
        if lam is None:
            lam = sample_lambda(items.shape, self.ccfg, generator, dtype=e.dtype, device=e.device)
        z = self.condition(e, x, d_s, lam) * mask.unsqueeze(-1).to(e.dtype)
        return self.encode(z, mask)[:, -1, :]

    def score_items(self, x0_hat):
        return score_items(x0_hat, self.item_emb.weight)


def transformer_forward(z, mask, model: Approximator, train: bool = False):
    was_training = model.training
    model.train(train)
    try:
        return model.encode(z, mask)
    finally:
        model.train(was_training)


def score_items(x0_hat, item_table):
    """Inner-product logits against every item; the padding column is -inf."""
    logits = x0_hat @ item_table.T
    logits = logits.clone()
    logits[..., 0] = float("-inf")
    return logits


def init_params(model: Approximator, generator: torch.Generator | None = None) -> Approximator:
    """Xavier-uniform weights and embeddings, zero biases, zero padding row."""
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.ndim >= 2:
                nn.init.xavier_uniform_(p, generator=generator)
            elif name.endswith("bias"):
                p.zero_()
            else:  # LayerNorm gain
                p.fill_(1.0)
        model.item_emb.weight[0].zero_()
    return model


def build_model(num_items: int, T: int, tcfg: TransformerConfig, ccfg: ConditioningConfig,
                seed: int = 0, dtype=torch.float32) -> Approximator:
    g = torch.Generator().manual_seed(seed)
    model = Approximator(num_items, T, tcfg, ccfg)
    init_params(model, g)
    return model.to(dtype)
