"""Central finite-difference gradient checks against the tape's analytic grads."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(f: Callable[[], Tensor], t: Tensor, coords=None, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``t`` at flat ``coords`` (all if None)."""
    flat = t.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(len(coords))
    with no_grad():
        for n, i in enumerate(coords):
            old = flat[i]
            flat[i] = old + eps
            fp = float(f().data.sum())
            flat[i] = old - eps
            fm = float(f().data.sum())
            flat[i] = old
            out[n] = (fp - fm) / (2 * eps)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              max_coords: int | None = None, rng=None) -> float:
    """Worst relative error over ``inputs`` between backward and finite differences.

    ``f`` must rebuild the graph from the current values of ``inputs`` on each
    call. With ``max_coords`` only a random subset of each input is probed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in inputs:
        t.zero_grad()
    loss = f()
    loss.backward()
    worst = 0.0
    for t in inputs:
        size = t.data.size
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, max_coords, replace=False))
        else:
            coords = np.arange(size)
        analytic = t.grad.reshape(-1)[coords].copy()
        numeric = numeric_grad(f, t, coords, eps)
        worst = max(worst, rel_error(analytic, numeric))
    return worst
