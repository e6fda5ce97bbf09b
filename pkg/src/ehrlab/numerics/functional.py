"""Fused differentiable operations used by the encoder, heads and losses."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.special import erf

from .tensor import Tensor, _emit, _stable_sigmoid, as_tensor

IGNORE_INDEX = -100

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class EmptyTargetsWarning(UserWarning):
    """Raised when a loss has no non-ignored rows and returns 0."""


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what}: non-finite input")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _emit(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._result(out, (x,), backward)


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax with ``mask == False`` entries excluded; fully masked slices give 0."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    _check_finite(x.data, "masked_softmax")
    filled = np.where(mask, x.data, -np.inf)
    peak = filled.max(axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x.data - peak, 0.0)), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def backward(g):
        _emit(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._result(out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        _emit(x, g - probs * g.sum(axis=axis, keepdims=True))

    return Tensor._result(out, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("layer_norm over a zero-length axis")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError(f"gain/bias shape must be ({n},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _emit(gain, (g * xhat).sum(axis=lead))
        _emit(bias, g.sum(axis=lead))
        gx = g * gain.data
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        _emit(x, gx)

    return Tensor._result(out, (x, gain, bias), backward)


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    a = x.data
    cdf = 0.5 * (1.0 + erf(a / _SQRT2))
    out = a * cdf

    def backward(g):
        _emit(x, g * (cdf + a * _INV_SQRT_2PI * np.exp(-0.5 * a * a)))

    return Tensor._result(out, (x,), backward)


def silu(x) -> Tensor:
    """Swish / SiLU: x * sigmoid(x)."""
    x = as_tensor(x)
    a = x.data
    s = _stable_sigmoid(a)

    def backward(g):
        _emit(x, g * (s + a * s * (1.0 - s)))

    return Tensor._result(a * s, (x,), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    rows = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"embedding index out of range [0, {rows})")

    def backward(g):
        full = np.zeros(weight.shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _emit(weight, full)

    return Tensor._result(weight.data[ids], (weight,), backward)


def linear(x, weight, bias=None) -> Tensor:
    out = as_tensor(x) @ weight
    return out if bias is None else out + bias


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep


def cross_entropy(logits, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ``ignore_index``.

    With no valid rows the loss is 0 and an :class:`EmptyTargetsWarning` is emitted.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    flat = logits.data.reshape(-1, logits.shape[-1])
    n_classes = flat.shape[1]
    valid = targets != ignore_index
    bad = valid & ((targets < 0) | (targets >= n_classes))
    if bad.any():
        raise IndexError(f"target outside [0, {n_classes})")
    count = int(valid.sum())
    if count == 0:
        warnings.warn("cross_entropy: no non-ignored targets", EmptyTargetsWarning, stacklevel=2)
        return Tensor._result(np.array(0.0), (logits,), lambda g: _emit(logits, np.zeros(logits.shape)))
    rows = np.nonzero(valid)[0]
    sub = flat[rows]
    shifted = sub - sub.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(count), targets[rows]]
    loss = nll.mean()

    def backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(count), targets[rows]] -= 1.0
        full = np.zeros_like(flat)
        full[rows] = probs * (g / count)
        _emit(logits, full.reshape(logits.shape))

    return Tensor._result(np.array(loss), (logits,), backward)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits, computed stably."""
    logits = as_tensor(logits)
    z = logits.data
    y = np.asarray(targets, dtype=np.float64).reshape(z.shape)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        _emit(logits, g * (_stable_sigmoid(z) - y) / n)

    return Tensor._result(np.array(loss.mean()), (logits,), backward)
