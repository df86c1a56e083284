"""Interacting-particle Euler-Maruyama scheme for the controlled McKean-Vlasov SDE.

The singular increment ``dzeta[k]`` acts on ``(t_k, t_{k+1}]`` and is applied
after the diffusion increment; the empirical law of slice ``k`` is frozen
for the step (explicit scheme).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from ._parallel import chunked
from .measure import moment_stats
from .problem.spec import MuStats, ProblemSpec


class ForwardBlowUp(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"forward state became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("time grid needs at least 2 steps")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @cached_property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt


@dataclass(frozen=True)
class BrownianGrid:
    """Brownian increments ``(N, M, r)`` with one random stream per particle.

    Particle ``m`` always draws from child ``m`` of ``SeedSequence(seed)``, so
    regeneration is bitwise identical and the first particles do not change
    when ``M`` grows.
    """

    increments: np.ndarray
    seed: int
    dt: float

    @classmethod
    def generate(cls, grid: TimeGrid, particles: int, noise_dim: int, seed: int) -> "BrownianGrid":
        children = np.random.SeedSequence(seed).spawn(particles)
        dw = np.empty((grid.steps, particles, noise_dim))
        scale = np.sqrt(grid.dt)
        for m, child in enumerate(children):
            dw[:, m, :] = scale * np.random.default_rng(child).standard_normal((grid.steps, noise_dim))
        dw.setflags(write=False)
        return cls(dw, int(seed), grid.dt)

    def coarsen(self, factor: int) -> "BrownianGrid":
        """Increments of the same paths on a grid ``factor`` times coarser."""
        if factor < 1 or self.steps % factor:
            raise ValueError(f"cannot coarsen {self.steps} steps by {factor}")
        n, m, r = self.increments.shape
        dw = self.increments.reshape(n // factor, factor, m, r).sum(axis=1)
        dw.setflags(write=False)
        return BrownianGrid(dw, self.seed, self.dt * factor)

    @property
    def steps(self) -> int:
        return self.increments.shape[0]

    @property
    def particles(self) -> int:
        return self.increments.shape[1]


def initial_states(spec: ProblemSpec, particles: int, init_seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(init_seed), 0x1D]))
    return spec.initial_law.sample(particles, rng)


@dataclass
class ControlField:
    """Regular controls ``alpha (N, M, l)`` and singular increments ``dzeta (N, M, k)``."""

    alpha: np.ndarray
    dzeta: np.ndarray

    def __post_init__(self):
        if self.alpha.shape[:2] != self.dzeta.shape[:2]:
            raise ValueError("alpha and dzeta must share the (N, M) grid")
        if np.any(self.dzeta < 0):
            raise ValueError("singular increments must be nonnegative")

    @classmethod
    def zeros(cls, spec: ProblemSpec, steps: int, particles: int) -> "ControlField":
        alpha = np.broadcast_to(spec.control_set.origin(), (steps, particles, spec.control_dim)).copy()
        return cls(alpha, np.zeros((steps, particles, spec.singular_dim)))

    def zeta(self) -> np.ndarray:
        """Cumulative singular control, ``(N + 1, M, k)`` with ``zeta[0] = 0``."""
        z = np.zeros((self.dzeta.shape[0] + 1,) + self.dzeta.shape[1:])
        np.cumsum(self.dzeta, axis=0, out=z[1:])
        return z

    def copy(self) -> "ControlField":
        return ControlField(self.alpha.copy(), self.dzeta.copy())


@dataclass
class ParticleEnsemble:
    X: np.ndarray  # (N + 1, M, n)
    grid: TimeGrid
    noise: BrownianGrid
    mus: list[MuStats] = field(repr=False)
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def particles(self) -> int:
        return self.X.shape[1]


def simulate_forward(
    spec: ProblemSpec,
    controls: ControlField,
    noise: BrownianGrid,
    init_seed: int = 0,
    *,
    x0: np.ndarray | None = None,
    workers: int = 1,
) -> ParticleEnsemble:
    """Run the particle Euler scheme; deterministic in all inputs."""
    steps, particles = controls.alpha.shape[:2]
    if noise.increments.shape[:2] != (steps, particles):
        raise ValueError("noise grid does not match the control field")
    if noise.increments.shape[2] != spec.noise_dim:
        raise ValueError("noise dimension does not match the problem")
    grid = TimeGrid(spec.horizon, steps)
    if abs(grid.dt - noise.dt) > 1e-15 * max(1.0, grid.dt):
        raise ValueError("noise grid step does not match the horizon / steps")
    if np.any(controls.dzeta < 0):
        raise ValueError("singular increments must be nonnegative")
    if x0 is None:
        x0 = initial_states(spec, particles, init_seed)
    X = np.empty((steps + 1, particles, spec.state_dim))
    X[0] = x0
    mus = []
    dt = grid.dt
    # overflow surfaces as ForwardBlowUp below rather than as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            t = grid.times[k]
            mu = moment_stats(X[k])
            mus.append(mu)

            def step(x, u, dw, dz, t=t, mu=mu):
                b = spec.drift(t, x, mu, u)
                sig = spec.diffusion(t, x, mu, u)
                return x + b * dt + np.einsum("mij,mj->mi", sig, dw) + dz @ spec.gain(t).T

            X[k + 1] = chunked(step, (X[k], controls.alpha[k], noise.increments[k], controls.dzeta[k]), workers)
            if not np.all(np.isfinite(X[k + 1])):
                raise ForwardBlowUp(k + 1)
        mus.append(moment_stats(X[steps]))
    return ParticleEnsemble(X, grid, noise, mus)


def moment_bound_check(ens: ParticleEnsemble, p: float) -> tuple[float, float]:
    """``(max_k avg_m |X_k|^p, that / (1 + avg_m |X_0|^p))``."""
    if not p > 2:
        raise ValueError("moment order must exceed 2")
    norms = np.linalg.norm(ens.X, axis=2) ** p
    sup_moment = float(np.max(norms.mean(axis=1)))
    return sup_moment, sup_moment / (1.0 + float(norms[0].mean()))


def constraint_values(spec: ProblemSpec, ens: ParticleEnsemble, controls: ControlField) -> np.ndarray:
    """Constraint values ``(N, M, d)`` at the grid points ``t_0 .. t_{N-1}``."""
    steps = controls.alpha.shape[0]
    out = np.empty((steps, ens.particles, spec.constraint_count))
    for k in range(steps):
        out[k] = spec.eval_constraints(ens.grid.times[k], ens.X[k], ens.mus[k], controls.alpha[k])
    return out


def constraint_occupation(
    spec: ProblemSpec, ens: ParticleEnsemble, controls: ControlField, tol: float = 1e-8
) -> np.ndarray:
    """Fraction of grid-particle pairs where each constraint holds up to ``tol``."""
    phi = constraint_values(spec, ens, controls)
    return np.mean(phi >= -tol, axis=(0, 1))


def dump_trajectories(path: Path | str, ens: ParticleEnsemble, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write a time-major CSV: ``k,t,particle,x_0..x_{n-1}`` then any extra fields.

    Extra fields are ``(N + 1, M, ...)`` or ``(N, M, ...)`` arrays; rows past
    their last step are left empty.
    """
    extra = extra or {}
    steps1, particles, n = ens.X.shape
    header = ["k", "t", "particle"] + [f"x_{i}" for i in range(n)]
    flat = {}
    for name, arr in extra.items():
        a = np.asarray(arr).reshape(arr.shape[0], particles, -1)
        flat[name] = a
        header += [f"{name}_{j}" for j in range(a.shape[2])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(steps1):
            for m in range(particles):
                row = [k, repr(float(ens.grid.times[k])), m] + [repr(float(v)) for v in ens.X[k, m]]
                for a in flat.values():
                    row += [repr(float(v)) for v in a[k, m]] if k < a.shape[0] else [""] * a.shape[2]
                w.writerow(row)
