"""Least-squares Monte Carlo solver for the adjoint equation with ``Y_T = 0``.

One backward step on the particle cloud::

    Ybar_k = E[Y_{k+1} | X_k]
    Z_k    = E[(Y_{k+1} - Ybar_k) dW_k^T | X_k] / dt
    Y_k    = Ybar_k + dt * driver(t_k, X_k, mu_k, alpha_k, Ybar_k, Z_k, eta_k)

Conditional expectations are ridge regressions on polynomials of the
standardised state. Evaluating the driver at ``Ybar_k`` makes the recursion
the exact adjoint of the particle Euler scheme when the regression is exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._parallel import chunked
from .forward import ControlField, ParticleEnsemble
from .hamiltonian import HamiltonianContext, adjoint_driver, grad_x_lagrangian, lions_term
from .problem.spec import ProblemSpec


class RegressionError(np.linalg.LinAlgError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"regression failed at step {step}: {reason}")
        self.step = step


class DriverError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"adjoint driver became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial basis in the state up to ``degree`` plus a constant.

    ``kind="pathwise"`` replaces the regression by the identity, which is
    exact when the state path is a deterministic function of ``X_0``.
    """

    degree: int = 2
    ridge: float = 1e-8  # multiplied by M
    kind: str = "polynomial"

    def __post_init__(self):
        if self.kind not in ("polynomial", "pathwise"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree < 1:
            raise ValueError("basis degree must be at least 1")
        if self.ridge < 0:
            raise ValueError("ridge parameter must be nonnegative")

    def design(self, x: np.ndarray) -> np.ndarray:
        """Design matrix on standardised coordinates; degenerate coordinates are dropped."""
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        live = std > 1e-12 * (1.0 + np.abs(mean))
        xs = (x[:, live] - mean[live]) / std[live]
        cols = [np.ones(x.shape[0])]
        for deg in range(1, self.degree + 1):
            for combo in combinations_with_replacement(range(xs.shape[1]), deg):
                cols.append(np.prod(xs[:, list(combo)], axis=1))
        return np.stack(cols, axis=1)

    def fit(self, x: np.ndarray, target: np.ndarray, step: int = -1) -> np.ndarray:
        """Fitted conditional expectation of ``target`` (``(M, ...)``) given ``x``."""
        return self.regressor(x, step).fit(target)

    def regressor(self, x: np.ndarray, step: int = -1) -> "_Regressor":
        if self.kind == "pathwise":
            return _Regressor(None, None)
        m = x.shape[0]
        phi = self.design(x)
        p = phi.shape[1]
        if p == 1:
            return _Regressor(phi, None)
        if m <= p:
            raise RegressionError(step, f"{m} samples for {p} basis functions")
        penalty = self.ridge * m * np.eye(p)
        penalty[0, 0] = 0.0
        try:
            factor = cho_factor(phi.T @ phi + penalty)
        except np.linalg.LinAlgError as exc:
            raise RegressionError(step, str(exc)) from None
        if not np.all(np.isfinite(factor[0])):
            raise RegressionError(step, "non-finite normal equations")
        return _Regressor(phi, factor)


@dataclass(frozen=True)
class _Regressor:
    """Factorised normal equations of one time step, reusable across targets."""

    phi: np.ndarray | None
    factor: tuple | None

    def fit(self, target: np.ndarray) -> np.ndarray:
        if self.phi is None:
            return np.array(target, dtype=float, copy=True)
        m = target.shape[0]
        flat = target.reshape(m, -1)
        if self.factor is None:
            return np.broadcast_to(flat.mean(axis=0), flat.shape).reshape(target.shape).copy()
        coef = cho_solve(self.factor, self.phi.T @ flat)
        return (self.phi @ coef).reshape(target.shape)


def _regressors(basis: RegressionBasis, ens: ParticleEnsemble) -> list[_Regressor]:
    key = ("regressors", basis)
    if key not in ens.cache:
        ens.cache[key] = [basis.regressor(ens.X[k], k) for k in range(ens.X.shape[0] - 1)]
    return ens.cache[key]


def default_basis(spec: ProblemSpec, degree: int = 2, ridge: float = 1e-8) -> RegressionBasis:
    return RegressionBasis(degree, ridge, "pathwise" if spec.noise_free else "polynomial")


@dataclass
class AdjointField:
    Y: np.ndarray  # (N + 1, M, n), Y[N] = 0
    Z: np.ndarray  # (N, M, n, r)
    Ybar: np.ndarray  # (N, M, n), E[Y[k+1] | X_k]


def _eta_field(spec: ProblemSpec, eta, steps: int, particles: int) -> np.ndarray:
    if eta is None:
        return np.zeros((steps, particles, spec.constraint_count))
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (steps, particles, spec.constraint_count):
        raise ValueError(f"eta has shape {eta.shape}, expected {(steps, particles, spec.constraint_count)}")
    return eta


def _step_driver(ctx, k, ens, controls, ybar, z, eta, workers):
    spec = ctx.spec
    t = ens.grid.times[k]
    x, mu, u = ens.X[k], ens.mus[k], controls.alpha[k]
    if workers <= 1:
        drv = adjoint_driver(ctx, t, x, mu, u, ybar, z, eta)
    else:
        # cloud reduction first, then row-wise work in chunks
        lions = lions_term(ctx, t, x, mu, u, ybar, z, eta)
        rowwise = chunked(lambda *a: grad_x_lagrangian(ctx, t, a[0], mu, a[1], a[2], a[3], a[4]), (x, u, ybar, z, eta), workers)
        drv = rowwise + lions
    if not np.all(np.isfinite(drv)):
        raise DriverError(k)
    return drv


def _regress_step(reg: _Regressor, k, ens, y_next):
    dw = ens.noise.increments[k]
    if reg.phi is None:
        return reg.fit(y_next), np.zeros(y_next.shape + (dw.shape[1],))
    ybar = reg.fit(y_next)
    # centring by ybar leaves the conditional expectation unchanged (E[dW | X_k] = 0)
    # and removes the dominant variance term of the Z estimator
    fluct = (y_next - ybar)[:, :, None] * dw[:, None, :]
    z = reg.fit(fluct.reshape(y_next.shape[0], -1)).reshape(fluct.shape) / ens.grid.dt
    return ybar, z


def solve_adjoint(
    spec: ProblemSpec,
    ens: ParticleEnsemble,
    controls: ControlField,
    eta=None,
    r0: float = 1.0,
    basis: RegressionBasis | None = None,
    workers: int = 1,
) -> AdjointField:
    ctx = HamiltonianContext(spec, r0)
    basis = basis or default_basis(spec)
    steps, particles, n = ens.X.shape[0] - 1, ens.particles, spec.state_dim
    eta = _eta_field(spec, eta, steps, particles)
    Y = np.zeros((steps + 1, particles, n))
    Z = np.zeros((steps, particles, n, spec.noise_dim))
    Ybar = np.zeros((steps, particles, n))
    dt = ens.grid.dt
    regs = _regressors(basis, ens)
    for k in range(steps - 1, -1, -1):
        Ybar[k], Z[k] = _regress_step(regs[k], k, ens, Y[k + 1])
        Y[k] = Ybar[k] + dt * _step_driver(ctx, k, ens, controls, Ybar[k], Z[k], eta[k], workers)
    return AdjointField(Y, Z, Ybar)


def bsde_residual(
    spec: ProblemSpec,
    ens: ParticleEnsemble,
    adj: AdjointField,
    controls: ControlField,
    eta=None,
    r0: float = 1.0,
    basis: RegressionBasis | None = None,
) -> float:
    """RMS one-step self-consistency error of ``Y``, normalised by ``1 + RMS|Y|``.

    The terminal pin ``Y[N] = 0`` is part of the check.
    """
    ctx = HamiltonianContext(spec, r0)
    basis = basis or default_basis(spec)
    steps = adj.Y.shape[0] - 1
    eta = _eta_field(spec, eta, steps, ens.particles)
    dt = ens.grid.dt
    sq = float(np.sum(adj.Y[steps] ** 2))
    regs = _regressors(basis, ens)
    for k in range(steps):
        ybar, z = _regress_step(regs[k], k, ens, adj.Y[k + 1])
        target = ybar + dt * _step_driver(ctx, k, ens, controls, ybar, z, eta[k], 1)
        sq += float(np.sum((adj.Y[k] - target) ** 2))
    rms = np.sqrt(sq / (steps * ens.particles))
    return float(rms / (1.0 + np.sqrt(np.mean(np.sum(adj.Y**2, axis=2)))))
