"""Central finite-difference oracles for checking reverse-mode gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

FD_STEP = 1e-5


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = FD_STEP) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place one entry at a time."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def directional_grad(f: Callable[[], float], x: np.ndarray, direction: np.ndarray, eps: float = FD_STEP) -> float:
    """Central-difference estimate of the derivative of ``f`` along ``direction``."""
    old = x.copy()
    x += eps * direction
    up = f()
    x[...] = old - eps * direction
    down = f()
    x[...] = old
    return (up - down) / (2 * eps)


def rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """max |a - n| / max(max |a|, max |n|, floor).

    The floor keeps exactly-zero gradients from turning finite-difference
    roundoff (around 1e-11) into a large ratio.
    """
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)), floor)
    return float(np.max(np.abs(a - n), initial=0.0)) / scale
