"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], float], param: Tensor, coords, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the flat entries ``coords`` of ``param``."""
    flat = param.data.reshape(-1)
    out = np.empty(len(coords))
    for k, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + eps
        up = f()
        flat[c] = orig - eps
        down = f()
        flat[c] = orig
        out[k] = (up - down) / (2 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``|a - n| / (|a| + |n|)`` in the 2-norm; 0 when both vanish."""
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def pick_coords(grad: np.ndarray, budget: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``budget`` flat indices: the largest-magnitude gradient entries plus
    a uniform sample, so sparse gradients (embedding tables) are still exercised."""
    size = grad.size
    if size <= budget:
        return np.arange(size)
    half = budget // 2
    top = np.argsort(-np.abs(grad.reshape(-1)), kind="stable")[:half]
    rest = rng.choice(size, size=budget - half, replace=False)
    return np.unique(np.concatenate([top, rest]))
