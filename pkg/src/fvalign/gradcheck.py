"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``param.data``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor],
                    h: float = 1e-5) -> list[float]:
    """Relative error between tape and finite-difference gradients, per parameter."""
    with Tape() as tape:
        loss = fn()
    analytic = tape.backward(loss, list(params))
    return [relative_error(a, numeric_grad(fn, p, h)) for a, p in zip(analytic, params)]


def joint_relative_error(fn: Callable[[], Tensor], params: Sequence[Tensor],
                         h: float = 1e-5) -> float:
    """Relative error over all parameters taken as one concatenated gradient vector.

    Useful when some slices are orders of magnitude smaller than others (for
    example saturated gates), where per-tensor ratios only measure rounding noise.
    """
    with Tape() as tape:
        loss = fn()
    analytic = tape.backward(loss, list(params))
    numeric = [numeric_grad(fn, p, h) for p in params]
    return relative_error(np.concatenate([a.ravel() for a in analytic]),
                          np.concatenate([n.ravel() for n in numeric]))
