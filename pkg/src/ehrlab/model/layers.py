"""Time2Vec, rotary position embeddings and the two feed-forward variants."""

from __future__ import annotations

import numpy as np

from ..numerics import Tensor, as_tensor, concat, dropout, gelu, linear, silu
from ..numerics.tensor import _emit


def time2vec(tau, omega, phi, scale: float, clip: float) -> Tensor:
    """Linear channel 0 (clipped) followed by cosine channels.

    ``tau`` has any shape; the output appends a trailing axis of length ``len(omega)``.
    """
    tau = np.asarray(tau, dtype=np.float64)[..., None] * scale
    omega, phi = as_tensor(omega), as_tensor(phi)
    z = omega * tau + phi
    linear_part = z[..., :1].clip(-clip, clip)
    periodic = z[..., 1:].cos()
    return concat([linear_part, periodic], axis=-1)


def rope_angles(positions, head_dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape ``[len(positions), head_dim // 2]``."""
    if head_dim % 2:
        raise ValueError("rope needs an even head dimension")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    theta = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(theta), np.sin(theta)


def _rotate(a: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = a[..., 0::2], a[..., 1::2]
    out = np.empty_like(a)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_rotate(x, positions, base: float = 10000.0) -> Tensor:
    """Rotate interleaved pairs ``(2j, 2j+1)`` of ``x[..., L, D]`` by ``m * base^(-2j/D)``."""
    x = as_tensor(x)
    cos, sin = rope_angles(positions, x.shape[-1], base)

    def backward(g):
        # a rotation's adjoint is the rotation by the opposite angle
        _emit(x, _rotate(g, cos, -sin))

    return Tensor._result(_rotate(x.data, cos, sin), (x,), backward)


def gelu_ffn(x, w_in, b_in, w_out, b_out) -> Tensor:
    return linear(gelu(linear(x, w_in, b_in)), w_out, b_out)


def swiglu_ffn(x, w1, w2, w3) -> Tensor:
    """``(silu(x W1) * (x W2)) W3``."""
    x = as_tensor(x)
    return (silu(x @ w1) * (x @ w2)) @ w3


def ffn_forward(x, params: dict, prefix: str, kind: str, p_drop: float, rng, training: bool) -> Tensor:
    if kind == "swiglu":
        out = swiglu_ffn(x, params[f"{prefix}.w1"], params[f"{prefix}.w2"], params[f"{prefix}.w3"])
    else:
        out = gelu_ffn(x, params[f"{prefix}.w_in"], params[f"{prefix}.b_in"],
                       params[f"{prefix}.w_out"], params[f"{prefix}.b_out"])
    return dropout(out, p_drop, rng, training)
