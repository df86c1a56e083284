"""Damped fixed-point iteration for the constrained forward-backward system.

Each outer iteration runs the forward particle scheme, the backward adjoint
solve, measures every optimality residual at that consistent iterate and then
updates the controls and multipliers:

* ``alpha <- (1 - theta) alpha + theta u_hat`` with ``u_hat`` the pointwise
  minimiser of the (Lagrangian) Hamiltonian at ``(X_k, mu_k, Ybar_k, Z_k)``;
* ``eta <- max(0, eta - rho_eta phi)``;
* ``dzeta <- max(0, dzeta - rho_zeta dt s)``, a projected step on the rate
  ``dzeta / dt``.

Step sizes shrink geometrically when the worst residual keeps increasing.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._parallel import chunked
from .bsde import AdjointField, RegressionBasis, bsde_residual, solve_adjoint
from .forward import (
    BrownianGrid,
    ControlField,
    ParticleEnsemble,
    TimeGrid,
    constraint_values,
    initial_states,
    simulate_forward,
)
from .hamiltonian import HamiltonianContext, grad_u_lagrangian, minimize_H_in_u, natural_residual
from .kkt import (
    MultiplierField,
    complementarity_gap,
    complementarity_residuals,
    fj_normalize,
    singular_signal,
    update_eta,
    update_singular,
)
from .problem.spec import ProblemSpec

RESIDUAL_COLUMNS = ("vi", "comp_state", "comp_singular", "dualfeas", "primalfeas", "bsde")
CSV_HEADER = ("iter",) + RESIDUAL_COLUMNS + ("control_change", "cost")


@dataclass(frozen=True)
class SolverOptions:
    steps: int = 100
    particles: int = 2000
    theta: float = 0.5
    max_outer: int = 500
    tol_vi: float = 1e-6
    tol_comp: float = 1e-6
    tol_bsde: float = 1e-8
    tol_fix: float = 1e-6
    mode: str = "kkt"
    seed: int = 0
    init_seed: int | None = None
    degree: int = 2
    ridge: float = 1e-8
    basis: str = "auto"
    rho_eta: float | None = None
    rho_zeta: float | None = None
    lipschitz: float = 1.0
    anderson: int = 5
    reset_factor: float = 2.0
    backoff: float = 0.5
    patience: int = 3
    min_theta: float = 1e-4
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        for name in ("tol_vi", "tol_comp", "tol_bsde", "tol_fix"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.mode not in ("kkt", "fj"):
            raise ValueError("mode must be 'kkt' or 'fj'")
        if self.steps < 2:
            raise ValueError("steps must be at least 2")
        if self.particles < 1:
            raise ValueError("particles must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be positive")
        if self.basis not in ("auto", "polynomial", "pathwise"):
            raise ValueError("basis must be auto, polynomial or pathwise")
        if self.anderson < 0:
            raise ValueError("anderson memory must be nonnegative")
        if not 0 < self.backoff < 1:
            raise ValueError("backoff must lie in (0, 1)")
        for name in ("rho_eta", "rho_zeta"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def resolved_init_seed(self) -> int:
        return self.seed + 1 if self.init_seed is None else self.init_seed

    def step_sizes(self) -> tuple[float, float]:
        default = 1.0 / (1.0 + self.lipschitz)
        return (self.rho_eta or default, self.rho_zeta or default)

    def tolerances(self) -> dict[str, float]:
        return {
            "vi": self.tol_vi,
            "comp_state": self.tol_comp,
            "comp_singular": self.tol_comp,
            "dualfeas": self.tol_comp,
            "primalfeas": self.tol_comp,
            "bsde": self.tol_bsde,
        }

    def make_basis(self, spec: ProblemSpec) -> RegressionBasis:
        kind = self.basis
        if kind == "auto":
            kind = "pathwise" if spec.noise_free else "polynomial"
        return RegressionBasis(self.degree, self.ridge, kind)


@dataclass
class ResidualReport:
    history: list[dict] = field(default_factory=list)
    status: str = "running"
    tolerances: dict = field(default_factory=dict)
    complementarity_gap: float = 0.0
    monotone_tail: bool = True

    @property
    def final(self) -> dict:
        return self.history[-1]

    @property
    def iterations(self) -> int:
        return len(self.history)

    def within_tolerance(self, row: dict | None = None) -> bool:
        row = self.final if row is None else row
        return all(row[k] <= self.tolerances[k] for k in RESIDUAL_COLUMNS)

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for row in self.history:
                w.writerow([row["iter"]] + [format(row[c], ".17g") for c in CSV_HEADER[1:]])


@dataclass
class Solution:
    spec: ProblemSpec
    options: SolverOptions
    ensemble: ParticleEnsemble
    controls: ControlField
    adjoint: AdjointField
    multipliers: MultiplierField
    report: ResidualReport
    cost: float
    phi: np.ndarray
    signal: np.ndarray

    @property
    def converged(self) -> bool:
        return self.report.status == "converged"

    def summary(self) -> dict:
        return {
            "problem": self.spec.name,
            "status": self.report.status,
            "iterations": self.report.iterations,
            "cost": self.cost,
            "r0": self.multipliers.r0,
            "residuals": {k: self.report.final[k] for k in RESIDUAL_COLUMNS},
            "control_change": self.report.final["control_change"],
            "complementarity_gap": self.report.complementarity_gap,
            "monotone_tail": self.report.monotone_tail,
            "zeta_T_mean": float(self.controls.dzeta.sum(axis=0).mean()) if self.controls.dzeta.size else 0.0,
            "eta_max": float(self.multipliers.eta.max()) if self.multipliers.eta.size else 0.0,
        }


@dataclass
class InitialGuess:
    alpha: np.ndarray | None = None
    dzeta: np.ndarray | None = None
    eta: np.ndarray | None = None


def discrete_cost(spec: ProblemSpec, ens: ParticleEnsemble, controls: ControlField) -> float:
    """``dt * sum_k avg_m f(t_k, X_k, mu_k, alpha_k) + avg_m sum_k c(t_k) . dzeta_k``."""
    steps = controls.alpha.shape[0]
    total = 0.0
    for k in range(steps):
        t = ens.grid.times[k]
        total += ens.grid.dt * float(np.mean(spec.eval_cost(t, ens.X[k], ens.mus[k], controls.alpha[k])))
        if spec.singular_dim:
            total += float(np.mean(controls.dzeta[k] @ spec.singular_price(t)))
    return total


@dataclass
class _Evaluation:
    ens: ParticleEnsemble
    adj: AdjointField
    phi: np.ndarray
    signal: np.ndarray
    grad: np.ndarray
    u_hat: np.ndarray
    row: dict


class _Problem:
    """Everything that stays fixed across outer iterations."""

    def __init__(self, spec: ProblemSpec, opts: SolverOptions, noise: BrownianGrid | None, x0):
        self.spec = spec
        self.opts = opts
        self.grid = TimeGrid(spec.horizon, opts.steps)
        self.noise = noise or BrownianGrid.generate(self.grid, opts.particles, spec.noise_dim, opts.seed)
        self.x0 = initial_states(spec, opts.particles, opts.resolved_init_seed) if x0 is None else np.asarray(x0, dtype=float)
        self.basis = opts.make_basis(spec)

    def evaluate(self, controls: ControlField, mult: MultiplierField, rho_ref: tuple[float, float]) -> _Evaluation:
        spec, opts, dt = self.spec, self.opts, self.grid.dt
        ens = simulate_forward(spec, controls, self.noise, x0=self.x0, workers=opts.workers)
        adj = solve_adjoint(spec, ens, controls, mult.eta, mult.r0, self.basis, opts.workers)
        ctx = HamiltonianContext(spec, mult.r0)
        phi = constraint_values(spec, ens, controls)
        signal = singular_signal(spec, ens, adj, mult.r0)
        steps = controls.alpha.shape[0]
        grad = np.empty_like(controls.alpha)
        u_hat = np.empty_like(controls.alpha)
        for k in range(steps):
            t, mu = self.grid.times[k], ens.mus[k]

            def pointwise(x, u, y, z, e, t=t, mu=mu):
                g = grad_u_lagrangian(ctx, t, x, mu, u, y, z, e)
                v, _ = minimize_H_in_u(ctx, t, x, mu, y, z, eta=e, u0=u)
                return g, v

            grad[k], u_hat[k] = chunked(
                pointwise, (ens.X[k], controls.alpha[k], adj.Ybar[k], adj.Z[k], mult.eta[k]), opts.workers
            )
        comp = complementarity_residuals(phi, mult.eta, signal, controls.dzeta, dt)
        # fixed-point displacement in a metric that does not depend on backoff
        rho_eta, rho_zeta = rho_ref
        d_alpha = u_hat - controls.alpha
        d_eta = update_eta(mult.eta, phi, rho_eta) - mult.eta
        d_rate = (update_singular(controls.dzeta, signal, rho_zeta * dt) - controls.dzeta) / dt
        change = np.sqrt(
            np.mean(np.sum(d_alpha**2, axis=2))
            + (np.mean(np.sum(d_eta**2, axis=2)) if d_eta.size else 0.0)
            + (np.mean(np.sum(d_rate**2, axis=2)) if d_rate.size else 0.0)
        )
        row = {
            "vi": float(np.sqrt(np.mean(natural_residual(spec, controls.alpha, grad) ** 2))),
            "comp_state": comp.state,
            "comp_singular": comp.singular,
            "dualfeas": comp.dualfeas,
            "primalfeas": comp.primalfeas,
            "bsde": bsde_residual(spec, ens, adj, controls, mult.eta, mult.r0, self.basis),
            "control_change": float(change),
            "cost": discrete_cost(spec, ens, controls),
        }
        return _Evaluation(ens, adj, phi, signal, grad, u_hat, row)


def _initial_state(spec: ProblemSpec, opts: SolverOptions, guess: InitialGuess | None):
    n_steps, m = opts.steps, opts.particles
    controls = ControlField.zeros(spec, n_steps, m)
    eta = np.zeros((n_steps, m, spec.constraint_count))
    if guess is not None:
        if guess.alpha is not None:
            a = np.broadcast_to(np.asarray(guess.alpha, dtype=float), controls.alpha.shape)
            controls.alpha = spec.project_control(a.copy())
        if guess.dzeta is not None:
            controls.dzeta = np.maximum(0.0, np.broadcast_to(np.asarray(guess.dzeta, dtype=float), controls.dzeta.shape).copy())
        if guess.eta is not None:
            eta = np.maximum(0.0, np.broadcast_to(np.asarray(guess.eta, dtype=float), eta.shape).copy())
    return controls, MultiplierField(eta, 1.0)


def _pack(*arrays) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays])


def _unpack(v: np.ndarray, *shapes):
    out, i = [], 0
    for shp in shapes:
        size = int(np.prod(shp))
        out.append(v[i : i + size].reshape(shp))
        i += size
    return out


class _Anderson:
    """Type-II Anderson mixing of a fixed-point map ``x -> g(x)``."""

    def __init__(self, memory: int):
        self.memory = memory
        self.xs: list[np.ndarray] = []
        self.gs: list[np.ndarray] = []

    def reset(self) -> None:
        self.xs.clear()
        self.gs.clear()

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.xs.append(x)
        self.gs.append(g)
        if len(self.xs) > self.memory + 1:
            self.xs.pop(0)
            self.gs.pop(0)
        if len(self.xs) < 2:
            return g
        F = np.stack([gi - xi for gi, xi in zip(self.gs, self.xs)], axis=1)
        G = np.stack(self.gs, axis=1)
        dF, dG = np.diff(F, axis=1), np.diff(G, axis=1)
        gamma = np.linalg.lstsq(dF, F[:, -1], rcond=1e-10)[0]
        return g - dG @ gamma


def _merit(row: dict, tolerances: dict) -> float:
    return max(row[k] / tolerances[k] for k in RESIDUAL_COLUMNS)


def solve(
    spec: ProblemSpec,
    opts: SolverOptions | None = None,
    *,
    guess: InitialGuess | None = None,
    noise: BrownianGrid | None = None,
    x0=None,
) -> Solution:
    """Solve the optimality system; deterministic given ``(spec, opts, guess)``."""
    opts = opts or SolverOptions()
    prob = _Problem(spec, opts, noise, x0)
    dt = prob.grid.dt
    tolerances = opts.tolerances()
    report = ResidualReport(tolerances=tolerances)
    controls, mult = _initial_state(spec, opts, guess)
    rho_ref = opts.step_sizes()
    theta, (rho_eta, rho_zeta) = opts.theta, rho_ref

    accel = _Anderson(opts.anderson)
    best = None
    prev_merit = np.inf
    strikes = 0
    for it in range(opts.max_outer):
        ev = prob.evaluate(controls, mult, rho_ref)
        row = {"iter": it, **ev.row}
        report.history.append(row)
        merit = _merit(row, tolerances)
        if best is None or merit < best[0]:
            best = (merit, controls.copy(), mult.copy(), ev, len(report.history))
        feasible = row["primalfeas"] <= tolerances["primalfeas"] and row["dualfeas"] <= tolerances["dualfeas"]
        if report.within_tolerance(row) or (row["control_change"] <= opts.tol_fix and feasible):
            report.status = "converged"
            break
        if it == opts.max_outer - 1:
            break
        watch = row["control_change"]
        if watch > prev_merit * opts.reset_factor:
            accel.reset()
            strikes += 1
            if strikes >= opts.patience and theta > opts.min_theta:
                theta *= opts.backoff
                rho_eta *= opts.backoff
                rho_zeta *= opts.backoff
                strikes = 0
        prev_merit = watch
        alpha = (1.0 - theta) * controls.alpha + theta * ev.u_hat
        rate = update_singular(controls.dzeta, ev.signal, rho_zeta * dt) / dt
        eta = update_eta(mult.eta, ev.phi, rho_eta)
        if opts.anderson:
            mixed = accel.step(_pack(controls.alpha, mult.eta, controls.dzeta / dt), _pack(alpha, eta, rate))
            alpha, eta, rate = _unpack(mixed, alpha.shape, eta.shape, rate.shape)
        r0 = 1.0
        eta = np.maximum(0.0, eta)
        if opts.mode == "fj" and eta.size:
            r0, eta = fj_normalize(1.0, eta, dt)
        controls = ControlField(spec.project_control(alpha), np.maximum(0.0, rate) * dt)
        mult = MultiplierField(eta, r0)

    if report.status != "converged":
        report.status = "not converged"
        _, controls, mult, ev, _ = best
    report.monotone_tail = _monotone_tail(report, tolerances)
    if report.status == "converged" and opts.mode == "kkt" and not report.monotone_tail:
        report.status = "not converged"
    report.complementarity_gap = complementarity_gap(ev.phi, mult.eta, dt)
    return Solution(
        spec=spec,
        options=opts,
        ensemble=ev.ens,
        controls=controls,
        adjoint=ev.adj,
        multipliers=mult,
        report=report,
        cost=ev.row["cost"],
        phi=ev.phi,
        signal=ev.signal,
    )


def _monotone_tail(report: ResidualReport, tolerances: dict, window: int = 10) -> bool:
    """Worst-residual history non-increasing over the last ``window`` iterations.

    Rows already within tolerance count as non-increasing.
    """
    tail = [_merit(r, tolerances) for r in report.history[-window:]]
    return all(b <= max(a, 1.0) for a, b in zip(tail[:-1], tail[1:]))


# ----------------------------------------------------------------- experiments


def solution_distance(a: Solution, b: Solution) -> dict[str, float]:
    """RMS distances between two solutions on the same noise grid.

    The singular part is compared through ``int G dzeta`` only.
    """

    def rms(u, v):
        d = np.asarray(u) - np.asarray(v)
        return float(np.sqrt(np.mean(d * d))) if d.size else 0.0

    spec = a.spec

    def gz(sol):
        dz = sol.controls.dzeta
        if not spec.singular_dim:
            return np.zeros((dz.shape[0] + 1, dz.shape[1], spec.state_dim))
        inc = np.stack([dz[k] @ spec.gain(sol.ensemble.grid.times[k]).T for k in range(dz.shape[0])])
        out = np.zeros((dz.shape[0] + 1,) + inc.shape[1:])
        np.cumsum(inc, axis=0, out=out[1:])
        return out

    return {
        "X": rms(a.ensemble.X, b.ensemble.X),
        "alpha": rms(a.controls.alpha, b.controls.alpha),
        "Y": rms(a.adjoint.Y, b.adjoint.Y),
        "Z": rms(a.adjoint.Z, b.adjoint.Z),
        "eta": rms(a.multipliers.eta, b.multipliers.eta),
        "int_G_dzeta": rms(gz(a), gz(b)),
    }


def starting_guesses(spec: ProblemSpec, opts: SolverOptions, n_starts: int, seed: int = 0) -> list[InitialGuess]:
    """Zero start plus random constant-in-time guesses."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    out = [InitialGuess()]
    for _ in range(n_starts - 1):
        shape = (opts.steps, opts.particles)
        out.append(
            InitialGuess(
                alpha=rng.normal(0.0, 1.0, (1, 1, spec.control_dim)) * np.ones(shape + (1,)),
                dzeta=rng.uniform(0.0, 0.05, (1, 1, spec.singular_dim)) * np.ones(shape + (1,)) * (spec.horizon / opts.steps),
                eta=rng.uniform(0.0, 1.0, (1, 1, spec.constraint_count)) * np.ones(shape + (1,)),
            )
        )
    return out


@dataclass
class UniquenessResult:
    max_distance: float
    distances: list[dict]
    statuses: list[str]
    solutions: list[Solution] = field(repr=False, default_factory=list)


def uniqueness_probe(spec: ProblemSpec, opts: SolverOptions, n_starts: int = 3, seed: int = 0) -> UniquenessResult:
    """Solve from several starts on one noise grid; report the largest pairwise distance."""
    if n_starts < 1:
        raise ValueError("n_starts must be positive")
    grid = TimeGrid(spec.horizon, opts.steps)
    noise = BrownianGrid.generate(grid, opts.particles, spec.noise_dim, opts.seed)
    sols = [solve(spec, opts, guess=g, noise=noise) for g in starting_guesses(spec, opts, n_starts, seed)]
    dists = []
    worst = 0.0
    for i in range(len(sols)):
        for j in range(i + 1, len(sols)):
            d = solution_distance(sols[i], sols[j])
            dists.append({"pair": (i, j), **d})
            worst = max(worst, max(d.values()))
    return UniquenessResult(worst, dists, [s.report.status for s in sols], sols)


@dataclass
class StabilityResult:
    numerator: float
    denominator: float
    ratio: float
    statuses: tuple[str, str]
    solutions: tuple[Solution, Solution] = field(repr=False, default=None)


def stability_numerator(a: Solution, b: Solution) -> float:
    """Discrete coupled stability functional over paired particles."""
    dt = a.ensemble.grid.dt

    def sq(u, v):
        d = np.asarray(u) - np.asarray(v)
        return np.sum(d * d, axis=-1) if d.size else 0.0

    X1, X2 = a.ensemble.X, b.ensemble.X
    n_steps = X1.shape[0] - 1
    zshape = (n_steps, X1.shape[1], -1)
    integral = dt * (
        sq(X1[:-1], X2[:-1])
        + sq(a.controls.alpha, b.controls.alpha)
        + sq(a.adjoint.Y[:-1], b.adjoint.Y[:-1])
        + sq(a.adjoint.Z.reshape(zshape), b.adjoint.Z.reshape(zshape))
        + sq(a.multipliers.eta, b.multipliers.eta)
    ).sum(axis=0)
    spec = a.spec
    gz = np.zeros(X1.shape[1:])
    for k in range(n_steps):
        G = spec.gain(a.ensemble.grid.times[k])
        gz += (a.controls.dzeta[k] - b.controls.dzeta[k]) @ G.T
    total = sq(X1[-1], X2[-1]) + integral + np.sum(gz * gz, axis=-1)
    return float(np.mean(total))


def stability_probe(
    spec: ProblemSpec,
    opts: SolverOptions,
    law1=None,
    law2=None,
) -> StabilityResult:
    """Coupled solves from two initial laws on a common noise grid and common draws."""
    law1 = law1 or spec.initial_law
    law2 = law2 or spec.initial_law
    grid = TimeGrid(spec.horizon, opts.steps)
    noise = BrownianGrid.generate(grid, opts.particles, spec.noise_dim, opts.seed)
    s1, s2 = replace(spec, initial_law=law1), replace(spec, initial_law=law2)
    x1 = initial_states(s1, opts.particles, opts.resolved_init_seed)
    x2 = initial_states(s2, opts.particles, opts.resolved_init_seed)
    a = solve(s1, opts, noise=noise, x0=x1)
    b = solve(s2, opts, noise=noise, x0=x2)
    num = stability_numerator(a, b)
    den = float(np.mean(np.sum((x1 - x2) ** 2, axis=1)))
    ratio = 0.0 if num == 0.0 and den == 0.0 else (num / den if den > 0 else float("inf"))
    return StabilityResult(num, den, ratio, (a.report.status, b.report.status), (a, b))


def options_dict(opts: SolverOptions) -> dict:
    return asdict(opts)
