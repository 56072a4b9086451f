"""Wasserstein-1 distances between empirical measures on [-1, 1] and [-1, 1]^m."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import CapacityError, ParameterError

MAX_JOINT_POINTS = 512
MAX_JOINT_DIM = 8
_RANGE_SLACK = 1e-12


def _as_sample(x, name="sample") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ParameterError(f"{name} is empty")
    if not np.all(np.isfinite(x)):
        raise ParameterError(f"{name} has non-finite entries")
    if np.any(np.abs(x) > 1.0 + _RANGE_SLACK):
        raise ParameterError(f"{name} leaves [-1, 1]")
    return x


def w1_sorted(a, b) -> float:
    """Exact W1 between two equal-size 1-D empirical measures (sorted pairing)."""
    a = _as_sample(a, "a").ravel()
    b = _as_sample(b, "b").ravel()
    if a.size != b.size:
        raise ParameterError(f"size mismatch {a.size} != {b.size}; use w1_cdf")
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def w1_cdf(a, b) -> float:
    """W1 as the integral of ``|F_a - F_b|``; sizes may differ."""
    a = np.sort(_as_sample(a, "a").ravel())
    b = np.sort(_as_sample(b, "b").ravel())
    grid = np.concatenate([a, b])
    grid.sort(kind="mergesort")
    widths = np.diff(grid)
    left = grid[:-1]
    Fa = np.searchsorted(a, left, side="right") / a.size
    Fb = np.searchsorted(b, left, side="right") / b.size
    return float(np.sum(np.abs(Fa - Fb) * widths))


def w1_joint(a, b) -> float:
    """Exact W1 between equal-size empirical measures on ``[-1, 1]^m`` with L1 cost.

    Solved as an assignment problem on the ``n x n`` cost matrix.
    """
    a = _as_sample(a, "a")
    b = _as_sample(b, "b")
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} != {b.shape}")
    n, m = a.shape
    if n > MAX_JOINT_POINTS or m > MAX_JOINT_DIM:
        raise CapacityError(
            f"joint W1 is capped at n <= {MAX_JOINT_POINTS}, m <= {MAX_JOINT_DIM} "
            f"(got n={n}, m={m}); the largest marginal W1 is a lower bound"
        )
    cost = cdist(a, b, metric="cityblock")
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / n)
