"""
Attention Module
Multi-head scaled-dot-product attention with optional relative-position bias,
boolean masks and per-query top-k sparsification.

Masks are boolean with True meaning "query may attend to key". Top-k runs per head
on the masked, RPE-inclusive logits; ties keep the lowest key index.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

import tensor as T
from layers import Linear, Module
from tensor import Tensor

logger = logging.getLogger(__name__)


class EmptyAttentionRowError(ValueError):
    """A query row has no allowed key and was not declared context-free."""


@dataclass
class AttentionConfig:
    d_model: int
    heads: int
    k: Optional[int] = None  # None = dense

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by {self.heads} heads")
        if self.k is not None and self.k < 1:
            raise ValueError(f"top-k needs k >= 1, got {self.k}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads


@dataclass
class AttentionMap:
    """Post-softmax weights and the keys that survived masking and top-k, (B, heads, n, n)."""
    weights: np.ndarray
    keep: np.ndarray


class AttentionWeights(Module):
    """W^Q, W^K, W^V (d_model x heads*d_k) and the output projection."""

    def __init__(self, d_model: int, rng: np.random.Generator, std: float = 0.02):
        self.w_q = Linear(d_model, d_model, rng, std)
        self.w_k = Linear(d_model, d_model, rng, std)
        self.w_v = Linear(d_model, d_model, rng, std)
        self.w_o = Linear(d_model, d_model, rng, std)


def causal_mask(n: int) -> np.ndarray:
    """Query i may see keys 0..i."""
    return np.tril(np.ones((n, n), dtype=bool))


def _split_heads(x, heads: int):
    batch, tokens, d_model = x.shape
    return x.reshape(batch, tokens, heads, d_model // heads).transpose(0, 2, 1, 3)


def _prepare_mask(mask, batch: int, tokens: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != (tokens, tokens) or mask.ndim not in (2, 3):
        raise T.ShapeError("attention mask", mask.shape, (tokens, tokens))
    if mask.ndim == 3 and mask.shape[0] not in (1, batch):
        raise T.ShapeError("attention mask", mask.shape, (batch, tokens, tokens))
    return mask.reshape((-1, 1, tokens, tokens))


def topk_filter(logits, k: int):
    """Keep the k largest logits of every row, the rest become -inf."""
    return T.topk_select(logits, k)


def scaled_dot_attention(x, weights: AttentionWeights, heads: int,
                         rpe_bias: Union[Tensor, Callable, None] = None,
                         mask=None, k: Optional[int] = None,
                         allow_empty_rows: bool = False, return_weights: bool = False):
    """
    softmax(Q K^T / sqrt(d_k) + B) V per head, heads concatenated and projected.

    x is (tokens, d_model) or (batch, tokens, d_model). rpe_bias is either a tensor
    broadcastable to (batch, heads, tokens, tokens) or a callable receiving the
    per-head queries (batch, heads, tokens, d_k). Rows with no allowed key raise
    EmptyAttentionRowError unless allow_empty_rows, in which case their attention
    weights are exactly zero.

    Returns:
        output tensor shaped like x, plus an AttentionMap when return_weights is set
    """
    x = T._lift(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3:
        raise T.ShapeError("scaled_dot_attention", x.shape, ("tokens", "d_model"))
    batch, tokens, d_model = x.shape
    if d_model % heads:
        raise ValueError(f"d_model {d_model} is not divisible by {heads} heads")
    d_k = d_model // heads

    q = _split_heads(weights.w_q(x), heads)
    key = _split_heads(weights.w_k(x), heads)
    v = _split_heads(weights.w_v(x), heads)
    logits = T.matmul(q, key.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d_k))
    if rpe_bias is not None:
        logits = logits + (rpe_bias(q) if callable(rpe_bias) else rpe_bias)

    empty = None
    if mask is not None:
        allowed = _prepare_mask(mask, batch, tokens)
        empty = ~allowed.any(axis=-1)
        if empty.any():
            if not allow_empty_rows:
                rows = np.unique(np.nonzero(empty)[-1]).tolist()
                raise EmptyAttentionRowError(f"query rows {rows} have no allowed keys")
            allowed = allowed | empty[..., None]
        else:
            empty = None
        logits = T.masked_fill(logits, ~allowed, -np.inf)
    if k is not None:
        logits = topk_filter(logits, k)

    attn = T.softmax(logits, axis=-1)
    if empty is not None:
        attn = T.masked_fill(attn, np.broadcast_to(empty[..., None], attn.shape), 0.0)
    out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(batch, tokens, d_model)
    out = weights.w_o(out)
    if squeeze:
        out = out.reshape(tokens, d_model)
    if return_weights:
        keep = np.isfinite(logits.data)
        if empty is not None:
            keep &= ~empty[..., None]
        return out, AttentionMap(attn.data, np.broadcast_to(keep, attn.shape).copy())
    return out


def topk_attention(x, weights: AttentionWeights, heads: int, rpe_bias=None, mask=None,
                   k: int = 32, allow_empty_rows: bool = False):
    """Attention where only the k largest logits per query survive the softmax."""
    if k < 1:
        raise ValueError(f"top-k needs k >= 1, got {k}")
    return scaled_dot_attention(x, weights, heads, rpe_bias, mask, k, allow_empty_rows)
