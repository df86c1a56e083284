"""Independent ground truth: Riccati equations for LQ and a direct discrete NLP.

The NLP oracle optimises the discretised cost over every entry of
``(alpha, dzeta)`` on a fixed noise grid. Its gradient comes from a
hand-written reverse sweep through the Euler recursion and does not use the
solver's adjoint or Hamiltonian code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .forward import BrownianGrid, TimeGrid, initial_states
from .problem.controlsets import Box, Reals
from .problem.families import build_family
from .problem.laws import InitialLaw
from .problem.spec import MuStats, ProblemSpec


class RiccatiBlowUp(ArithmeticError):
    pass


@dataclass(frozen=True)
class LQSpec:
    """``dX = (a X + abar E[X] + bhat u) dt + sigma0 dW``, cost ``q/2 X^2 + qbar/2 E[X]^2 + rho/2 u^2``.

    Every coordinate of an ``n``-dimensional state is an independent copy.
    """

    a: float = 0.0
    abar: float = 0.0
    bhat: float = 1.0
    sigma0: float = 0.0
    q: float = 1.0
    qbar: float = 0.0
    rho: float = 1.0
    horizon: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.q < 0 or self.q + self.qbar < 0:
            raise ValueError("need q >= 0 and q + qbar >= 0")

    def to_spec(self, initial_law: InitialLaw) -> ProblemSpec:
        return build_family(
            "lq",
            {
                "dim": self.dim,
                "a": self.a,
                "abar": self.abar,
                "bhat": self.bhat,
                "sigma0": self.sigma0,
                "q": self.q,
                "qbar": self.qbar,
                "rho": self.rho,
            },
            horizon=self.horizon,
            initial_law=initial_law,
        )

    @classmethod
    def from_spec(cls, spec: ProblemSpec) -> "LQSpec":
        p = spec.params
        if spec.name != "lq":
            raise ValueError("the Riccati oracle needs the unconstrained 'lq' family")
        for key in ("b0", "sigma1", "qmx", "kappa"):
            if float(p.get(key, 0.0)) != 0.0:
                raise ValueError(f"the Riccati oracle needs {key} = 0")
        if np.any(np.asarray(p.get("x_ref", 0.0)) != 0):
            raise ValueError("the Riccati oracle needs x_ref = 0")
        if not isinstance(spec.control_set, Reals):
            raise ValueError("the Riccati oracle needs an unconstrained control set")
        return cls(
            **{k: float(p.get(k, d)) for k, d in (("a", 0.0), ("abar", 0.0), ("bhat", 1.0), ("sigma0", 0.0), ("q", 1.0), ("qbar", 0.0), ("rho", 1.0))},
            horizon=spec.horizon,
            dim=int(p.get("dim", 1)),
        )


@dataclass
class OracleResult:
    cost: float
    times: np.ndarray | None = None
    K: np.ndarray | None = None  # state gain on the solver grid
    kbar: np.ndarray | None = None  # mean gain on the solver grid
    P: np.ndarray | None = None
    Pi: np.ndarray | None = None
    alpha: np.ndarray | None = None
    dzeta: np.ndarray | None = None
    multipliers: np.ndarray | None = None
    status: str = "ok"
    info: dict = field(default_factory=dict)


def _riccati_rhs(lq: LQSpec, state):
    P, Pi, _ = state
    g = lq.bhat**2 / lq.rho
    # time-reversed: d/ds with s = T - t
    return np.array(
        [
            2 * lq.a * P - g * P * P + lq.q,
            2 * (lq.a + lq.abar) * Pi - g * Pi * Pi + lq.q + lq.qbar,
            P,
        ]
    )


def riccati_lq(lq: LQSpec, grid: TimeGrid, initial_law: InitialLaw, refine: int = 20, *, x0=None) -> OracleResult:
    """Integrate the state and mean Riccati equations backward with classical RK4.

    The ODE step is ``grid.dt / refine``; gains are sampled on ``grid``. The
    optimal cost is ``1/2 P(0) Var + 1/2 Pi(0) |m_0|^2 + 1/2 sigma0^2 n int P``.
    When the particle draws ``x0`` are given, ``Var`` and ``m_0`` are their
    empirical moments so that the comparison is free of initial sampling
    error; the cost under ``initial_law`` itself is kept in ``info["cost_law"]``.
    """
    if refine < 10:
        raise ValueError("the ODE grid must be at least 10x finer than the solver grid")
    n_fine = grid.steps * refine
    h = lq.horizon / n_fine
    states = np.zeros((n_fine + 1, 3))  # indexed by s = T - t
    y = np.zeros(3)
    for i in range(n_fine):
        k1 = _riccati_rhs(lq, y)
        k2 = _riccati_rhs(lq, y + 0.5 * h * k1)
        k3 = _riccati_rhs(lq, y + 0.5 * h * k2)
        k4 = _riccati_rhs(lq, y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)) or abs(y[0]) > 1e12 or abs(y[1]) > 1e12:
            raise RiccatiBlowUp(f"Riccati solution blew up at t = {lq.horizon - (i + 1) * h:.4g}")
        states[i + 1] = y
    on_grid = states[::refine][::-1]  # back to forward time t_0 .. t_N
    P, Pi, intP = on_grid[:, 0], on_grid[:, 1], on_grid[:, 2]
    K = lq.bhat * P / lq.rho
    kbar = lq.bhat * (Pi - P) / lq.rho

    def cost_at(var0, mean0):
        return float(0.5 * P[0] * var0 + 0.5 * Pi[0] * float(mean0 @ mean0) + 0.5 * lq.sigma0**2 * lq.dim * intP[0])

    cost_law = cost_at(float(np.sum(initial_law.variance)), np.asarray(initial_law.mean))
    info = {"refine": refine, "cost_law": cost_law}
    cost = cost_law
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        m0 = x0.mean(axis=0)
        cost = cost_at(float(np.mean(np.sum((x0 - m0) ** 2, axis=1))), m0)
    return OracleResult(cost, grid.times, K, kbar, P, Pi, status="ok", info=info)


def riccati_feedback(oracle: OracleResult, X: np.ndarray) -> np.ndarray:
    """Riccati control ``-K x - kbar mean`` on states ``X`` of shape ``(N + 1, M, n)``; returns ``(N, M, n)``."""
    X = np.asarray(X)[:-1]
    mean = X.mean(axis=1, keepdims=True)
    return -oracle.K[:-1, None, None] * X - oracle.kbar[:-1, None, None] * mean


def evaluate_feedback(lq: LQSpec, oracle: OracleResult, noise: BrownianGrid, x0: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Discrete cost of the Riccati feedback on a given noise grid.

    Returns ``(cost, X, alpha)``; the scheme mirrors the particle Euler step
    with the law frozen at the start of each step.
    """
    steps = noise.steps
    dt = noise.dt
    X = np.empty((steps + 1,) + x0.shape)
    A = np.empty((steps,) + x0.shape)
    X[0] = x0
    cost = 0.0
    for k in range(steps):
        m = X[k].mean(axis=0)
        A[k] = -oracle.K[k] * X[k] - oracle.kbar[k] * m
        cost += dt * float(
            np.mean(0.5 * lq.q * np.sum(X[k] ** 2, axis=1) + 0.5 * lq.rho * np.sum(A[k] ** 2, axis=1))
            + 0.5 * lq.qbar * float(m @ m)
        )
        X[k + 1] = X[k] + (lq.a * X[k] + lq.abar * m + lq.bhat * A[k]) * dt + lq.sigma0 * noise.increments[k]
    return cost, X, A


# -------------------------------------------------------------- discrete NLP


@dataclass(frozen=True)
class NLPOptions:
    max_iter: int = 50_000
    step_tol: float = 1e-8
    grad_tol: float = 1e-10
    al_outer: int = 30
    al_penalty: float = 10.0
    al_growth: float = 4.0
    feas_tol: float = 1e-7


class _DiscreteProblem:
    """Discretised cost, constraint and their gradients on a fixed noise grid.

    Decision variables are ``alpha (N, M, l)`` and ``dzeta (N, M, k)``. The
    gradient is a reverse sweep over the Euler recursion; moment-type
    mean-field terms are propagated through the law's mean and second moment.
    """

    def __init__(self, spec: ProblemSpec, noise: BrownianGrid, x0: np.ndarray):
        self.spec = spec
        self.noise = noise
        self.x0 = x0
        self.N, self.M = noise.steps, noise.particles
        self.dt = noise.dt
        self.times = np.arange(self.N + 1) * self.dt

    def unpack(self, v):
        s = self.spec
        na = self.N * self.M * s.control_dim
        alpha = v[:na].reshape(self.N, self.M, s.control_dim)
        dzeta = v[na:].reshape(self.N, self.M, s.singular_dim)
        return alpha, dzeta

    def pack(self, alpha, dzeta):
        return np.concatenate([np.ravel(alpha), np.ravel(dzeta)])

    def forward(self, alpha, dzeta):
        s = self.spec
        X = np.empty((self.N + 1, self.M, s.state_dim))
        X[0] = self.x0
        mus = []
        for k in range(self.N):
            t = self.times[k]
            mu = MuStats(X[k].mean(axis=0), float(np.mean(np.sum(X[k] ** 2, axis=1))))
            mus.append(mu)
            b = s.eval_drift(t, X[k], mu, alpha[k])
            sig = s.eval_diffusion(t, X[k], mu, alpha[k])
            X[k + 1] = X[k] + b * self.dt + np.einsum("mij,mj->mi", sig, self.noise.increments[k]) + dzeta[k] @ s.gain(t).T
        return X, mus

    def cost(self, X, mus, alpha, dzeta):
        s = self.spec
        total = 0.0
        for k in range(self.N):
            t = self.times[k]
            total += self.dt * float(np.mean(s.eval_cost(t, X[k], mus[k], alpha[k])))
            if s.singular_dim:
                total += float(np.mean(dzeta[k] @ s.singular_price(t)))
        return total

    def constraints(self, X, mus, alpha):
        s = self.spec
        return np.stack([s.eval_constraints(self.times[k], X[k], mus[k], alpha[k]) for k in range(self.N)])

    def lagrangian(self, v, lam, pen):
        """Augmented Lagrangian value and gradient.

        ``L = J + (dt / M) sum psi(phi, lam)`` with the standard inequality
        term ``psi = -lam phi + pen/2 phi^2`` if ``phi < lam / pen`` else
        ``-lam^2 / (2 pen)``.
        """
        s = self.spec
        alpha, dzeta = self.unpack(v)
        X, mus = self.forward(alpha, dzeta)
        value = self.cost(X, mus, alpha, dzeta)
        d = s.constraint_count
        w = np.zeros((self.N, self.M, d))  # d L / d phi scaled by M / dt
        if d:
            phi = self.constraints(X, mus, alpha)
            active = phi < lam / pen
            psi = np.where(active, -lam * phi + 0.5 * pen * phi**2, -(lam**2) / (2 * pen))
            value += self.dt * float(np.sum(psi)) / self.M
            w = np.where(active, -lam + pen * phi, 0.0)
        ga, gz = self._reverse(X, mus, alpha, dzeta, w)
        return value, self.pack(ga, gz)

    def _reverse(self, X, mus, alpha, dzeta, w):
        """Gradient of ``J + (dt/M) sum w . phi`` with ``w`` held fixed."""
        s = self.spec
        N, M, dt = self.N, self.M, self.dt
        lam = np.zeros((M, s.state_dim))  # M * dL/dX[k+1]
        ga = np.zeros_like(alpha)
        gz = np.zeros_like(dzeta)
        for k in range(N - 1, -1, -1):
            t = self.times[k]
            x, u, mu = X[k], alpha[k], mus[k]
            dw = self.noise.increments[k]
            if s.singular_dim:
                gz[k] = (s.singular_price(t)[None, :] + lam @ s.gain(t)) / M
            bx = s.partial("drift", "x", t, x, mu, u)
            bu = s.partial("drift", "u", t, x, mu, u)
            sx = s.partial("diffusion", "x", t, x, mu, u)
            su = s.partial("diffusion", "u", t, x, mu, u)
            fx = s.partial("cost", "x", t, x, mu, u)
            fu = s.partial("cost", "u", t, x, mu, u)
            # contributions through x directly
            gx = lam + dt * np.einsum("mij,mi->mj", bx, lam) + np.einsum("mikj,mk,mi->mj", sx, dw, lam) + dt * fx
            gu = dt * np.einsum("mij,mi->mj", bu, lam) + np.einsum("mikj,mk,mi->mj", su, dw, lam) + dt * fu
            # through the law: mean and second moment of slice k
            bm = s.partial("drift", "mean", t, x, mu, u)
            b2 = s.partial("drift", "m2", t, x, mu, u)
            sm = s.partial("diffusion", "mean", t, x, mu, u)
            s2 = s.partial("diffusion", "m2", t, x, mu, u)
            fm = s.partial("cost", "mean", t, x, mu, u)
            f2 = s.partial("cost", "m2", t, x, mu, u)
            d_mean = dt * np.einsum("mij,mi->j", bm, lam) + np.einsum("mikj,mk,mi->j", sm, dw, lam) + dt * fm.sum(axis=0)
            d_m2 = dt * float(np.einsum("mi,mi->", b2, lam)) + float(np.einsum("mik,mk,mi->", s2, dw, lam)) + dt * float(f2.sum())
            if s.constraint_count:
                px = s.partial("constraint", "x", t, x, mu, u)
                pu = s.partial("constraint", "u", t, x, mu, u)
                pm = s.partial("constraint", "mean", t, x, mu, u)
                p2 = s.partial("constraint", "m2", t, x, mu, u)
                gx = gx + dt * np.einsum("mi,mij->mj", w[k], px)
                gu = gu + dt * np.einsum("mi,mij->mj", w[k], pu)
                d_mean = d_mean + dt * np.einsum("mi,mij->j", w[k], pm)
                d_m2 = d_m2 + dt * float(np.einsum("mi,mi->", w[k], p2))
            # d mean / d x_m = 1/M, d m2 / d x_m = 2 x_m / M; values are totals over particles
            gx = gx + (d_mean[None, :] + 2.0 * d_m2 * x) / M
            ga[k] = gu / M
            lam = gx
        return ga, gz


def _project_box(spec: ProblemSpec):
    cset = spec.control_set
    if isinstance(cset, Box):
        return cset.low, cset.high
    if isinstance(cset, Reals):
        return np.full(spec.control_dim, -np.inf), np.full(spec.control_dim, np.inf)
    return None


def _minimise(prob: _DiscreteProblem, v0, lam, pen, opts: NLPOptions):
    """Inner bound-constrained minimisation of the augmented Lagrangian."""
    s = prob.spec
    box = _project_box(s)
    na = prob.N * prob.M * s.control_dim
    nz = prob.N * prob.M * s.singular_dim
    if box is not None:
        lo = np.concatenate([np.tile(box[0], prob.N * prob.M), np.zeros(nz)])
        hi = np.concatenate([np.tile(box[1], prob.N * prob.M), np.full(nz, np.inf)])
        bounds = list(zip(np.where(np.isfinite(lo), lo, None), np.where(np.isfinite(hi), hi, None)))
        res = minimize(
            lambda v: prob.lagrangian(v, lam, pen),
            v0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": opts.max_iter, "maxfun": 2 * opts.max_iter, "ftol": 1e-15, "gtol": opts.grad_tol, "maxcor": 50},
        )
        return res.x, res.nit, "ok" if res.success else str(res.message)
    return _projected_gradient(prob, v0, lam, pen, opts, na)


def _projected_gradient(prob, v, lam, pen, opts, na):
    """Projected gradient with Armijo backtracking for general convex ``U``."""
    s = prob.spec

    def project(w):
        a, z = prob.unpack(w)
        return prob.pack(s.project_control(a), np.maximum(z, 0.0))

    v = project(v)
    f, g = prob.lagrangian(v, lam, pen)
    step = 1.0
    for it in range(opts.max_iter):
        while True:
            trial = project(v - step * g)
            d = trial - v
            ft, gt = prob.lagrangian(trial, lam, pen)
            if ft <= f - 1e-4 / step * float(d @ d) or step < 1e-16:
                break
            step *= 0.5
        if step < 1e-16:
            return v, it, "line search failed"
        v, f, g = trial, ft, gt
        if np.linalg.norm(d) < opts.step_tol:
            return v, it, "ok"
        step *= 2.0
    return v, opts.max_iter, "max iterations"


def discrete_nlp(
    spec: ProblemSpec,
    steps: int,
    particles: int,
    seed: int,
    opts: NLPOptions | None = None,
    *,
    init_seed: int | None = None,
    noise: BrownianGrid | None = None,
    x0: np.ndarray | None = None,
) -> OracleResult:
    """Minimise the discretised cost directly over ``(alpha, dzeta)``.

    Constraints ``phi >= 0`` are handled by an augmented-Lagrangian outer
    loop; the returned multipliers are on the same scale as the solver's
    ``eta`` (the Lagrangian is ``J - (dt / M) sum eta . phi``).
    """
    if steps > 20 or particles > 500:
        raise ValueError("the NLP oracle is limited to N <= 20 and M <= 500")
    opts = opts or NLPOptions()
    grid = TimeGrid(spec.horizon, steps)
    noise = noise or BrownianGrid.generate(grid, particles, spec.noise_dim, seed)
    if x0 is None:
        x0 = initial_states(spec, particles, seed + 1 if init_seed is None else init_seed)
    prob = _DiscreteProblem(spec, noise, np.asarray(x0, dtype=float))
    alpha0 = np.broadcast_to(spec.control_set.origin(), (steps, particles, spec.control_dim))
    v = prob.pack(alpha0, np.zeros((steps, particles, spec.singular_dim)))
    d = spec.constraint_count
    lam = np.zeros((steps, particles, d))
    pen = opts.al_penalty
    status, iters = "ok", 0
    outer = opts.al_outer if d else 1
    viol = 0.0
    for _ in range(outer):
        v, nit, status = _minimise(prob, v, lam, pen, opts)
        iters += nit
        if not d:
            break
        alpha, dzeta = prob.unpack(v)
        X, mus = prob.forward(alpha, dzeta)
        phi = prob.constraints(X, mus, alpha)
        lam = np.maximum(0.0, lam - pen * phi)
        viol = float(np.max(np.maximum(0.0, -phi))) if phi.size else 0.0
        comp = float(np.max(np.abs(np.minimum(phi, lam / pen)))) if phi.size else 0.0
        if viol <= opts.feas_tol and comp <= opts.feas_tol:
            break
        pen *= opts.al_growth
    alpha, dzeta = prob.unpack(v)
    X, mus = prob.forward(alpha, dzeta)
    cost = prob.cost(X, mus, alpha, dzeta)
    return OracleResult(
        cost=cost,
        times=grid.times,
        alpha=alpha.copy(),
        dzeta=dzeta.copy(),
        multipliers=lam,
        status=status,
        info={"iterations": iters, "max_violation": viol, "X": X},
    )


# --------------------------------------------------------------- comparison


@dataclass(frozen=True)
class GapReport:
    cost_gap: float
    control_gap: float
    state_agreement: float | None
    singular_agreement: float | None

    def as_dict(self) -> dict:
        return {
            "cost_gap": self.cost_gap,
            "control_gap": self.control_gap,
            "state_active_set_agreement": self.state_agreement,
            "singular_support_agreement": self.singular_agreement,
        }


def _agreement(a: np.ndarray, b: np.ndarray, tol: float) -> float | None:
    if a.size == 0:
        return None
    on_a = np.any(a > tol, axis=-1)
    on_b = np.any(b > tol, axis=-1)
    return float(np.mean(on_a == on_b))


def compare(solution, oracle: OracleResult, *, alpha_ref: np.ndarray | None = None, tol: float = 1e-6) -> GapReport:
    """Relative cost gap, relative control RMS gap and active-set agreement.

    ``alpha_ref`` overrides the oracle's control field (used for Riccati
    feedback evaluated on the solver's own states). Support tolerances are
    ``tol`` for multipliers and ``tol * dt`` for singular increments.
    """
    ref = oracle.alpha if alpha_ref is None else alpha_ref
    cost_gap = abs(solution.cost - oracle.cost) / max(abs(oracle.cost), 1e-12)
    control_gap = float("nan")
    if ref is not None:
        diff = solution.controls.alpha - ref
        control_gap = float(np.sqrt(np.mean(diff**2)) / max(np.sqrt(np.mean(ref**2)), 1e-12))
    state = sing = None
    if oracle.multipliers is not None and solution.multipliers.eta.size:
        state = _agreement(solution.multipliers.eta, oracle.multipliers, tol)
    if oracle.dzeta is not None and solution.controls.dzeta.size:
        dt = solution.ensemble.grid.dt
        sing = _agreement(solution.controls.dzeta, oracle.dzeta, tol * dt)
    return GapReport(float(cost_gap), control_gap, state, sing)
