"""Closed convex control sets with exact Euclidean projections.

Every set projects arrays of shape ``(..., l)`` along the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ControlSet:
    dim: int

    def project(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contains(self, u: np.ndarray, tol: float = 1e-10) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.linalg.norm(self.project(u) - u, axis=-1) <= tol

    def origin(self) -> np.ndarray:
        """Projection of zero, the default initial control."""
        return self.project(np.zeros(self.dim))

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Reals(ControlSet):
    dim: int

    def project(self, u):
        return np.array(u, dtype=float, copy=True)

    def describe(self):
        return {"type": "reals", "dim": self.dim}


@dataclass(frozen=True)
class Box(ControlSet):
    low: np.ndarray
    high: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        low = np.atleast_1d(np.asarray(self.low, dtype=float))
        high = np.atleast_1d(np.asarray(self.high, dtype=float))
        if low.shape != high.shape or low.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if np.any(low > high):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        object.__setattr__(self, "dim", low.size)

    def project(self, u):
        return np.clip(np.asarray(u, dtype=float), self.low, self.high)

    def describe(self):
        return {"type": "box", "low": self.low.tolist(), "high": self.high.tolist()}


@dataclass(frozen=True)
class Ball(ControlSet):
    center: np.ndarray
    radius: float
    dim: int = field(init=False)

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        if self.radius < 0:
            raise ValueError("ball radius must be nonnegative")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dim", center.size)

    def project(self, u):
        d = np.asarray(u, dtype=float) - self.center
        norm = np.linalg.norm(d, axis=-1, keepdims=True)
        scale = np.where(norm > self.radius, self.radius / np.where(norm > 0, norm, 1.0), 1.0)
        return self.center + d * scale

    def describe(self):
        return {"type": "ball", "center": self.center.tolist(), "radius": float(self.radius)}


@dataclass(frozen=True)
class HalfSpaces(ControlSet):
    """Polyhedron ``{u : normals @ u <= offsets}``.

    A single half-space is projected in closed form; intersections use
    Dykstra's alternating projections, which converge to the exact
    Euclidean projection.
    """

    normals: np.ndarray
    offsets: np.ndarray
    tol: float = 1e-13
    max_sweeps: int = 10_000
    dim: int = field(init=False)

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.normals, dtype=float))
        b = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        if a.shape[0] != b.size:
            raise ValueError("one offset per half-space normal required")
        if np.any(np.linalg.norm(a, axis=1) == 0):
            raise ValueError("half-space normals must be nonzero")
        object.__setattr__(self, "normals", a)
        object.__setattr__(self, "offsets", b)
        object.__setattr__(self, "dim", a.shape[1])

    def _project_one(self, u, i):
        a = self.normals[i]
        excess = u @ a - self.offsets[i]
        return u - np.maximum(excess, 0.0)[..., None] * a / (a @ a)

    def project(self, u):
        u = np.asarray(u, dtype=float)
        if self.normals.shape[0] == 1:
            return self._project_one(u, 0)
        x = u.copy()
        corrections = [np.zeros_like(u) for _ in range(self.normals.shape[0])]
        for _ in range(self.max_sweeps):
            x_old = x
            for i in range(self.normals.shape[0]):
                y = self._project_one(x + corrections[i], i)
                corrections[i] = x + corrections[i] - y
                x = y
            if np.max(np.abs(x - x_old), initial=0.0) <= self.tol:
                break
        return x

    def describe(self):
        return {"type": "halfspaces", "normals": self.normals.tolist(), "offsets": self.offsets.tolist()}


@dataclass(frozen=True)
class CustomSet(ControlSet):
    """User-supplied projection; must be the exact projection onto a closed convex set."""

    projector: Callable[[np.ndarray], np.ndarray]
    dim: int

    def project(self, u):
        return np.asarray(self.projector(np.asarray(u, dtype=float)), dtype=float)

    def describe(self):
        return {"type": "custom", "dim": self.dim}


def control_set_from_config(cfg: dict, dim: int) -> ControlSet:
    kind = cfg.get("type", "reals")
    if kind == "reals":
        return Reals(dim)
    if kind == "box":
        low = np.broadcast_to(np.asarray(cfg["low"], dtype=float), (dim,))
        high = np.broadcast_to(np.asarray(cfg["high"], dtype=float), (dim,))
        return Box(low, high)
    if kind == "ball":
        center = np.broadcast_to(np.asarray(cfg.get("center", 0.0), dtype=float), (dim,))
        return Ball(center, float(cfg["radius"]))
    if kind == "halfspaces":
        return HalfSpaces(np.asarray(cfg["normals"], dtype=float), np.asarray(cfg["offsets"], dtype=float))
    raise ValueError(f"unknown control set type {kind!r}")
