from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class InitialLaw:
    """Product law of the initial state with independent coordinates.

    ``kind`` is one of ``dirac``, ``normal`` or ``uniform``. For ``dirac``
    ``loc`` is the atom; for ``normal`` ``loc``/``scale`` are mean and
    standard deviation; for ``uniform`` the support is ``[loc, loc + scale]``.
    ``shift`` translates every sample, which keeps the underlying draws
    identical between a law and its shifted copy.
    """

    kind: str
    loc: tuple[float, ...]
    scale: tuple[float, ...] = ()
    shift: float = 0.0

    def __post_init__(self):
        if self.kind not in ("dirac", "normal", "uniform"):
            raise ValueError(f"unknown initial law {self.kind!r}")
        loc = tuple(float(v) for v in np.atleast_1d(self.loc))
        scale = tuple(float(v) for v in np.atleast_1d(self.scale)) if len(np.atleast_1d(self.scale)) else ()
        if self.kind != "dirac":
            if len(scale) == 1 and len(loc) > 1:
                scale = scale * len(loc)
            if len(scale) != len(loc):
                raise ValueError("initial law scale must match its dimension")
            if any(s < 0 for s in scale):
                raise ValueError("initial law scale must be nonnegative")
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "scale", scale)

    @property
    def dim(self) -> int:
        return len(self.loc)

    def sample(self, m: int, rng: np.random.Generator) -> np.ndarray:
        loc = np.asarray(self.loc)
        if self.kind == "dirac":
            x = np.broadcast_to(loc, (m, self.dim)).copy()
        elif self.kind == "normal":
            x = loc + np.asarray(self.scale) * rng.standard_normal((m, self.dim))
        else:
            x = loc + np.asarray(self.scale) * rng.random((m, self.dim))
        return x + self.shift

    def shifted(self, eps: float) -> "InitialLaw":
        return replace(self, shift=self.shift + eps)

    @property
    def mean(self) -> np.ndarray:
        loc = np.asarray(self.loc)
        if self.kind == "uniform":
            loc = loc + 0.5 * np.asarray(self.scale)
        return loc + self.shift

    @property
    def variance(self) -> np.ndarray:
        if self.kind == "dirac":
            return np.zeros(self.dim)
        s = np.asarray(self.scale)
        return s**2 if self.kind == "normal" else s**2 / 12.0

    @property
    def second_moment(self) -> float:
        return float(np.sum(self.variance + self.mean**2))

    def describe(self) -> dict:
        out = {"type": self.kind, "loc": list(self.loc)}
        if self.scale:
            out["scale"] = list(self.scale)
        if self.shift:
            out["shift"] = self.shift
        return out


def initial_law_from_config(cfg: dict, dim: int) -> InitialLaw:
    kind = cfg.get("type", "dirac")
    loc = np.broadcast_to(np.asarray(cfg.get("loc", 0.0), dtype=float), (dim,))
    scale = cfg.get("scale", ())
    if kind != "dirac":
        scale = np.broadcast_to(np.asarray(scale, dtype=float), (dim,))
    return InitialLaw(kind, tuple(loc), tuple(np.atleast_1d(scale)), float(cfg.get("shift", 0.0)))
