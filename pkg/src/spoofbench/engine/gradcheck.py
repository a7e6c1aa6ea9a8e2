"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``; 0 if both vanish."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-4) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x.data`` (perturbed in place)."""
    out = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f().data)
        flat[i] = orig - step
        fm = float(f().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return out


def finite_diff_check(f: Callable[[], Tensor], at: Tensor | Sequence[Tensor],
                      step: float = 1e-4) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` is a closure that recomputes a scalar from the current values of the
    tensors in ``at``.
    """
    at = [at] if isinstance(at, Tensor) else list(at)
    analytic = grad(f(), at, allow_unused=True)
    return max(relative_error(a.data.astype(np.float64), numeric_grad(f, x, step))
               for a, x in zip(analytic, at))
