"""Central finite-difference gradient checking in double precision."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise deviation, scaled by the larger gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_gradient(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], which: int, h: float = 1e-3) -> np.ndarray:
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[which]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    with precision(np.float64):
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn(*[Tensor(a) for a in base]).data.sum())
            flat[i] = orig - h
            down = float(fn(*[Tensor(a) for a in base]).data.sum())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def check_gradients(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    h: float = 1e-3,
    wrt: Sequence[int] | None = None,
) -> float:
    """Compare reverse-mode gradients of ``sum(fn(*inputs))`` against central differences.

    Returns the worst :func:`relative_error` across the inputs in ``wrt``
    (all inputs by default).
    """
    wrt = range(len(arrays)) if wrt is None else wrt
    with precision(np.float64):
        inputs = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
        out = fn(*inputs)
        loss = out.sum() if out.size > 1 else out
        loss.backward()
    worst = 0.0
    for i in wrt:
        analytic = inputs[i].grad if inputs[i].grad is not None else np.zeros_like(inputs[i].data)
        numeric = numeric_gradient(fn, arrays, i, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
