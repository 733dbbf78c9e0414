"""Shared test oracles: finite differences and error metrics."""

import numpy as np


def finite_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f()`` with
    respect to ``x``, mutating ``x`` in place entry by entry. ``f`` must
    recompute from the current contents of ``x``."""
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = f()
        flat_x[i] = orig - h
        f_minus = f()
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def rel_err(approx: np.ndarray, reference: np.ndarray) -> float:
    """Max absolute deviation normalized by the reference's magnitude."""
    approx = np.asarray(approx, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    scale = max(float(np.abs(reference).max()), 1e-10)
    return float(np.abs(approx - reference).max()) / scale
