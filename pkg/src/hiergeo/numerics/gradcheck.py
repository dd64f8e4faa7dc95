"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(fn: Callable[[], Tensor], param: Parameter, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. every coordinate of ``param``."""
    base = param.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        work = base.copy()
        w = work.reshape(-1)
        w[i] = base.reshape(-1)[i] + h
        param.data = work
        fp = float(fn().data)
        w[i] = base.reshape(-1)[i] - h
        fm = float(fn().data)
        flat[i] = (fp - fm) / (2.0 * h)
    param.data = base
    return grad


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Return the worst relative error between autodiff and finite differences."""
    for p in params:
        p.zero_grad()
    backward(fn())
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        n = numeric_grad(fn, p, h)
        if a.size:
            worst = max(worst, float(relative_error(a, n, floor).max()))
    return worst
