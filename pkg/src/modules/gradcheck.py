"""
Central-difference gradient checking for the hand-derived adjoints.
"""
from typing import Callable, Optional, Tuple

import numpy as np

GradFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def numeric_grad(fn: GradFn, x: np.ndarray, eps: float = 1e-3,
                 coords: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of fn's scalar output at the selected flat coordinates."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    out = np.zeros(len(coords), dtype=np.float64)
    for i, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + eps
        f_plus = float(fn(x)[0])
        flat[c] = orig - eps
        f_minus = float(fn(x)[0])
        flat[c] = orig
        out[i] = (f_plus - f_minus) / (2.0 * eps)
    return out


def grad_check(fn: GradFn, x: np.ndarray, eps: float = 1e-3,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """
    Compare fn's analytic gradient against central differences.

    The probe point is promoted to float64 so truncation error, not float32
    roundoff, sets the achievable tolerance.

    Args:
        fn: maps x -> (scalar value, gradient with x's shape)
        x: point to check at
        eps: finite-difference step
        max_coords: check a deterministic random subset of this many coordinates

    Returns:
        max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    """
    x = np.array(x, dtype=np.float64)
    _, analytic = fn(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    coords = np.arange(analytic.size)
    if max_coords is not None and max_coords < analytic.size:
        coords = np.sort(np.random.default_rng(seed).choice(analytic.size, max_coords, replace=False))
    numeric = numeric_grad(fn, x, eps, coords)
    a = analytic[coords]
    denom = np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(np.max(np.abs(a - numeric) / denom)) if len(coords) else 0.0
