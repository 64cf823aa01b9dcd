"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-5,
                 indices: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``leaf.data``.

    With ``indices``, only those entries are perturbed; the rest of the
    returned array is NaN.
    """
    data = leaf.data
    out = np.full(data.shape, np.nan) if indices is not None else np.zeros(data.shape)
    it = indices if indices is not None else list(np.ndindex(data.shape))
    for idx in it:
        orig = data[idx]
        data[idx] = orig + h
        fp = fn().item()
        data[idx] = orig - h
        fm = fn().item()
        data[idx] = orig
        out[idx] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)`` over the finite entries of ``numeric``."""
    keep = np.isfinite(numeric)
    a, n = analytic[keep], numeric[keep]
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None
                    ) -> dict[str, float]:
    """Compare backprop against central differences for every leaf.

    Leaves must hold float64 data and have ``requires_grad=True``. When
    ``max_entries`` is given, a random subset of that many entries per leaf
    is probed. Returns the relative error per leaf, keyed by name or index.
    """
    rng = rng or np.random.default_rng(0)
    for leaf in leaves:
        if leaf.data.dtype != np.float64:
            raise TypeError("gradient checks need double precision leaves")
        leaf.zero_grad()
    backward(fn())
    errors = {}
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        indices = None
        if max_entries is not None and leaf.data.size > max_entries:
            flat = rng.choice(leaf.data.size, size=max_entries, replace=False)
            indices = [np.unravel_index(j, leaf.data.shape) for j in flat]
        numeric = numeric_grad(fn, leaf, h, indices)
        errors[leaf.name or str(i)] = relative_error(analytic, numeric)
    return errors
