"""Central finite differences for checking analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                      step: float = DEFAULT_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x)
        x[idx] = orig - step
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic, numeric) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.concatenate([np.ravel(g) for g in analytic]) if isinstance(analytic, (list, tuple)) else np.ravel(analytic)
    n = np.concatenate([np.ravel(g) for g in numeric]) if isinstance(numeric, (list, tuple)) else np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)
