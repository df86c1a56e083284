"""Empirical-measure statistics and Wasserstein-2 distances."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .problem.spec import MuStats

EXACT_ASSIGNMENT_LIMIT = 256


class W2(NamedTuple):
    distance: float
    method: str  # "sorted", "assignment" or "bound"

    @property
    def exact(self) -> bool:
        return self.method != "bound"


def _cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("an empirical law needs at least one point")
    if not np.all(np.isfinite(pts)):
        raise ValueError("empirical law contains non-finite points")
    return pts


def moment_stats(points) -> MuStats:
    """Mean and second moment of the uniform empirical measure on ``points``.

    ``points`` is ``(M, n)``; a 1-d array is read as ``M`` scalar points.
    """
    pts = _cloud(points)
    return MuStats(pts.mean(axis=0), float(np.mean(np.sum(pts * pts, axis=1))), cloud=pts)


def wasserstein2(law1, law2) -> W2:
    """W2 distance between two uniform empirical measures of equal size.

    Exact for ``n = 1`` (sorted coupling) and for ``M <= 256`` (optimal
    assignment); above that an upper bound from the index coupling of the
    centred clouds, using ``W2^2 = |m1 - m2|^2 + W2^2(centred)``.
    """
    a, b = _cloud(law1), _cloud(law2)
    if a.shape != b.shape:
        raise ValueError(f"cardinality/dimension mismatch: {a.shape} vs {b.shape}")
    if a.shape[1] == 1:
        d2 = np.mean((np.sort(a[:, 0]) - np.sort(b[:, 0])) ** 2)
        return W2(float(np.sqrt(d2)), "sorted")
    if a.shape[0] <= EXACT_ASSIGNMENT_LIMIT:
        cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
        rows, cols = linear_sum_assignment(cost)
        return W2(float(np.sqrt(cost[rows, cols].mean())), "assignment")
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    d2 = float(np.sum((ma - mb) ** 2)) + float(np.mean(np.sum(((a - ma) - (b - mb)) ** 2, axis=1)))
    return W2(float(np.sqrt(d2)), "bound")
