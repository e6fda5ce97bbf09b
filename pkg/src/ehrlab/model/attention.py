from __future__ import annotations

import numpy as np

from ..numerics import Tensor, as_tensor, dropout, linear, masked_softmax
from .layers import rope_rotate


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, l, h = x.shape
    return x.reshape(b, l, heads, h // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, nh, l, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, nh * d)


def attention_weights(q: Tensor, k: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over keys of ``q k^T / sqrt(d)``; PAD keys get zero weight."""
    scores = (q @ k.swapaxes(-1, -2)) / np.sqrt(q.shape[-1])
    return masked_softmax(scores, mask[:, None, None, :], axis=-1)


def attention_forward(x, mask: np.ndarray, params: dict, prefix: str, heads: int, position: str = "learned",
                      rope_base: float = 10000.0, p_drop: float = 0.0, rng=None, training: bool = False) -> Tensor:
    """Multi-head self-attention over ``x[B, L, H]``.

    Keys at PAD positions are masked out and PAD query rows produce zeros.
    With ``position == "rope"`` queries and keys are rotated by token index.
    """
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    q = split_heads(linear(x, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), heads)
    k = split_heads(linear(x, params[f"{prefix}.wk"], params[f"{prefix}.bk"]), heads)
    v = split_heads(linear(x, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), heads)
    if position == "rope":
        positions = np.arange(x.shape[1])
        q = rope_rotate(q, positions, rope_base)
        k = rope_rotate(k, positions, rope_base)
    weights = dropout(attention_weights(q, k, mask), p_drop, rng, training)
    out = linear(merge_heads(weights @ v), params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    return out * mask[..., None]
