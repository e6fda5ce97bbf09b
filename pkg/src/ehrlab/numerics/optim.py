"""AdamW with decoupled weight decay."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def adamw_step(
    params: Iterable[Parameter],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-6,
    weight_decay: float = 0.0,
) -> None:
    """Apply one AdamW update in place.

    Decay is applied to the weights before the Adam step, as in Loshchilov & Hutter.
    Parameters with ``decay=False`` (biases, norm gains) skip the decay term.
    A parameter whose gradient is ``None`` is treated as having a zero gradient.
    """
    beta1, beta2 = betas
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name or i!r}")
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        p.step += 1
        if weight_decay and p.decay:
            p.data *= 1.0 - lr * weight_decay
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        denom = np.sqrt(v_hat) + eps
        update = np.divide(m_hat, denom, out=np.zeros_like(m_hat), where=denom > 0)
        p.data -= lr * update


class AdamW:
    """Holds hyperparameters so training loops can call ``step()``."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-6, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        adamw_step(self.params, self.lr, self.betas, self.eps, self.weight_decay)
