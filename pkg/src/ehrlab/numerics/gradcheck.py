"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.rel_tol)


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    rel_tol: float = 1e-4,
    step: float = 1e-4,
    floor: float = 1e-6,
    max_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps elements whose true gradient is ~0 from dividing round-off by zero.
    ``max_per_param`` samples that many elements of each parameter instead of
    checking all of them.
    """
    params = list(params)
    for p in params:
        p.grad = None
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    per_param: dict[str, float] = {}
    total = 0
    with no_grad():
        for k, (p, a) in enumerate(zip(params, analytic)):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = rng.choice(flat.size, size=max_per_param, replace=False)
            a_flat = a.reshape(-1)
            err = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                up = float(f().data)
                flat[i] = orig - step
                down = float(f().data)
                flat[i] = orig
                numeric = (up - down) / (2.0 * step)
                denom = max(abs(a_flat[i]), abs(numeric), floor)
                err = max(err, abs(a_flat[i] - numeric) / denom)
            total += len(idx)
            per_param[p.name or f"param{k}"] = err
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return GradCheckReport(max_rel_error=worst, rel_tol=rel_tol, per_param=per_param, n_checked=total)
