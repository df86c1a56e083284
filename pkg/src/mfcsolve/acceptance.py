"""Acceptance suite: ten desk-scale checks of the solver and its diagnostics.

Each ``criterion_*`` function runs one check at the required tolerances and
returns a :class:`CriterionResult`; :func:`run_acceptance` runs a selection
and is what the ``bench`` subcommand calls.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from .forward import BrownianGrid, TimeGrid, moment_bound_check
from .hamiltonian import HamiltonianContext, check_gradients
from .measure import wasserstein2
from .oracle import LQSpec, compare, discrete_nlp, riccati_feedback, riccati_lq
from .picard import Solution, SolverOptions, solve, stability_probe, uniqueness_probe
from .problem import InitialLaw, ProblemSpec, build_family, validate_spec


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    elapsed: float = 0.0

    def line(self) -> str:
        shown = ", ".join(f"{k}={_fmt(v)}" for k, v in self.details.items())
        return f"criterion {self.number:2d} {self.name}: {'PASS' if self.passed else 'FAIL'} ({shown}; {self.elapsed:.1f}s)"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3g}"
    return str(v)


# ------------------------------------------------------------ instances

LQ_MODEL = LQSpec(a=0.0, abar=0.0, bhat=1.0, sigma0=0.5, q=1.0, qbar=0.5, rho=1.0, horizon=1.0)
LQ_LAW = InitialLaw("normal", (1.0,), (0.5,))


def lq_family() -> ProblemSpec:
    return LQ_MODEL.to_spec(LQ_LAW)


def constrained_family(sigma0: float = 0.0) -> ProblemSpec:
    """State constraint ``x >= 0.8`` with particles starting on ``[0.8, 1.6]``."""
    return build_family(
        "lq_constrained",
        {"sigma0": sigma0, "constraint": {"A": 1.0, "B": 0.0, "C": -0.8}},
        initial_law=InitialLaw("uniform", (0.8,), (0.8,)),
    )


def singular_family(sigma0: float = 0.3) -> ProblemSpec:
    """Upward singular push priced at 0.3 from a cloud on ``[-1.5, -0.5]``."""
    return build_family(
        "lq_singular",
        {"sigma0": sigma0, "singular": {"G": 1.0, "c": 0.3}},
        initial_law=InitialLaw("uniform", (-1.5,), (1.0,)),
    )


def constrained_singular_family(sigma0: float = 0.3) -> ProblemSpec:
    """Constraint ``x >= -1`` that the singular push can enforce after the noise."""
    return build_family(
        "lq_constrained_singular",
        {"sigma0": sigma0, "qbar": 0.5, "constraint": {"A": 1.0, "B": 0.0, "C": 1.0}, "singular": {"G": 1.0, "c": 0.3}},
        initial_law=InitialLaw("uniform", (-0.5,), (1.0,)),
    )


def tiny_families() -> dict[str, ProblemSpec]:
    return {
        "lq": build_family("lq", {"qbar": 0.5, "abar": 0.2}, initial_law=InitialLaw("uniform", (0.5,), (1.0,))),
        "constrained": constrained_family(0.0),
        "singular": singular_family(0.0),
    }


def acceptance_families() -> dict[str, ProblemSpec]:
    return {
        "lq": lq_family(),
        "constrained": constrained_family(0.0),
        "singular": singular_family(),
        "constrained_singular": constrained_singular_family(),
    }


# ------------------------------------------------------------- criteria


def criterion_1(workers: int = 1) -> CriterionResult:
    """LQ optimality against the Riccati oracle."""
    t0 = time.perf_counter()
    opts = SolverOptions(steps=100, particles=2000, workers=workers)
    sol = solve(lq_family(), opts)
    elapsed = time.perf_counter() - t0
    oracle = riccati_lq(LQ_MODEL, TimeGrid(1.0, 100), LQ_LAW, x0=sol.ensemble.X[0])
    gap = compare(sol, oracle, alpha_ref=riccati_feedback(oracle, sol.ensemble.X))
    law_gap = abs(sol.cost - oracle.info["cost_law"]) / oracle.info["cost_law"]
    ok = gap.cost_gap <= 0.02 and gap.control_gap <= 0.02 and elapsed < 60.0
    details = {
        "status": sol.report.status,
        "cost": sol.cost,
        "riccati": oracle.cost,
        "cost_gap": gap.cost_gap,
        "cost_gap_vs_law": law_gap,
        "control_gap": gap.control_gap,
        "solve_seconds": elapsed,
    }
    return CriterionResult(1, "LQ optimality", ok, details)


def criterion_2(workers: int = 1) -> CriterionResult:
    """Agreement with the direct discrete NLP on tiny instances."""
    ok = True
    details = {}
    for name, spec in tiny_families().items():
        sol = solve(spec, SolverOptions(steps=10, particles=200, max_outer=2000, seed=3, workers=workers))
        nlp = discrete_nlp(spec, 10, 200, 3)
        gap = compare(sol, nlp)
        details[f"{name}_cost_gap"] = gap.cost_gap
        ok &= gap.cost_gap <= 0.01
        if gap.state_agreement is not None:
            details[f"{name}_active_set"] = gap.state_agreement
            details[f"{name}_active_share"] = float(np.mean(np.any(sol.multipliers.eta > 1e-6, axis=-1)))
            ok &= gap.state_agreement >= 0.9
        if gap.singular_agreement is not None:
            details[f"{name}_support"] = gap.singular_agreement
            details[f"{name}_support_share"] = float(np.mean(np.any(sol.controls.dzeta > 1e-6 * sol.ensemble.grid.dt, axis=-1)))
            ok &= gap.singular_agreement >= 0.9
    return CriterionResult(2, "oracle equivalence", bool(ok), details)


MEDIUM_FAMILIES: dict[str, Callable[[], ProblemSpec]] = {
    "constrained": lambda: constrained_family(0.0),
    "singular": singular_family,
    "constrained_singular": constrained_singular_family,
}


@lru_cache(maxsize=None)
def _solve_medium(name: str, workers: int) -> Solution:
    """One solve per family, shared by the complementarity criteria."""
    opts = SolverOptions(steps=50, particles=1000, max_outer=1000, workers=workers)
    return solve(MEDIUM_FAMILIES[name](), opts)


def criterion_3(workers: int = 1) -> CriterionResult:
    """State complementarity at exit on the constrained families."""
    ok = True
    details = {}
    for name in ("constrained", "constrained_singular"):
        sol = _solve_medium(name, workers)
        gap = sol.report.complementarity_gap
        feas = sol.report.final["primalfeas"]
        eta_min = float(sol.multipliers.eta.min())
        details[f"{name}_status"] = sol.report.status
        details[f"{name}_gap"] = gap
        details[f"{name}_primalfeas"] = feas
        details[f"{name}_eta_min"] = eta_min
        ok &= abs(gap) <= 1e-4 * (1.0 + abs(sol.cost)) and feas <= 1e-3 and eta_min >= 0.0
    return CriterionResult(3, "state complementarity", bool(ok), details)


def singular_support_mass(sol: Solution, threshold: float = 1e-2) -> tuple[float, float]:
    """Per-particle average of ``sum_k 1{s_k > threshold} dzeta_k`` and of ``|zeta_T|``."""
    dz = sol.controls.dzeta
    wrong = float(np.mean(np.sum(np.where(sol.signal > threshold, dz, 0.0), axis=(0, 2))))
    total = float(np.mean(np.abs(np.sum(dz, axis=(0, 2)))))
    return wrong, total


def criterion_4(workers: int = 1) -> CriterionResult:
    """Dual feasibility and support condition of the singular control."""
    ok = True
    details = {}
    for name in ("singular", "constrained_singular"):
        sol = _solve_medium(name, workers)
        wrong, total = singular_support_mass(sol)
        dual = sol.report.final["dualfeas"]
        details[f"{name}_status"] = sol.report.status
        details[f"{name}_dualfeas"] = dual
        details[f"{name}_off_support"] = wrong
        details[f"{name}_zeta_T"] = total
        ok &= dual <= 1e-3 and wrong <= 1e-4 * total
    return CriterionResult(4, "singular complementarity", bool(ok), details)


def criterion_5(workers: int = 1) -> CriterionResult:
    """Three starts on a monotone LQ instance reach the same solution."""
    spec = lq_family()
    report = validate_spec(spec, probes=200, seed=0, grid_steps=50)
    opts = SolverOptions(steps=50, particles=1000, tol_fix=1e-4, workers=workers)
    res = uniqueness_probe(spec, opts, n_starts=3, seed=0)
    c3 = report.checks["C3"].status
    ok = c3 == "pass" and res.max_distance <= 10 * opts.tol_fix
    return CriterionResult(5, "uniqueness", bool(ok), {"C3_probe": c3, "max_distance": res.max_distance, "statuses": res.statuses})


def criterion_6(workers: int = 1) -> CriterionResult:
    """Stability ratio is finite and nearly constant in the perturbation size."""
    t0 = time.perf_counter()
    spec = lq_family()
    opts = SolverOptions(steps=50, particles=1000, workers=workers)
    ratios = {}
    for eps in (0.2, 0.1, 0.05):
        res = stability_probe(spec, opts, spec.initial_law, spec.initial_law.shifted(eps))
        ratios[eps] = res.ratio
    elapsed = time.perf_counter() - t0
    vals = np.array(list(ratios.values()))
    spread = float(vals.max() / vals.min()) if np.all(vals > 0) else float("inf")
    ok = bool(np.all(np.isfinite(vals))) and spread < 2.0 and elapsed < 300.0
    details = {f"ratio_{eps}": r for eps, r in ratios.items()}
    details["spread"] = spread
    return CriterionResult(6, "stability", ok, details)


def criterion_7(workers: int = 1) -> CriterionResult:
    """Fourth-moment ratio is finite and resolution independent."""
    ok = True
    details = {}
    for name, spec in acceptance_families().items():
        # both resolutions see the same Brownian paths
        fine = BrownianGrid.generate(TimeGrid(spec.horizon, 50), 1000, spec.noise_dim, 0)
        ratios = []
        for noise in (fine.coarsen(2), fine):
            opts = SolverOptions(steps=noise.steps, particles=1000, max_outer=100, workers=workers)
            _, ratio = moment_bound_check(solve(spec, opts, noise=noise).ensemble, 4.0)
            ratios.append(ratio)
        change = abs(ratios[1] - ratios[0]) / ratios[0]
        details[f"{name}_ratio"] = ratios[1]
        details[f"{name}_change"] = change
        ok &= bool(np.isfinite(ratios).all()) and change < 0.2
    return CriterionResult(7, "moment bound", bool(ok), details)


def criterion_8(workers: int = 1) -> CriterionResult:
    """Analytic Hamiltonian gradients against central differences."""
    worst = 0.0
    details = {}
    for name, spec in acceptance_families().items():
        errs = check_gradients(HamiltonianContext(spec), probes=1000, seed=0)
        details[f"{name}_x"] = errs["x"]
        details[f"{name}_u"] = errs["u"]
        worst = max(worst, errs["x"], errs["u"])
    return CriterionResult(8, "gradient checks", worst < 1e-5, details)


def criterion_9(workers: int = 1) -> CriterionResult:
    """Exact W2 on a two-point example and the translation identity."""
    exact = wasserstein2(np.array([[0.0], [2.0]]), np.array([[1.0], [3.0]])).distance
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(2, 40))
        n = int(rng.integers(1, 4))
        cloud = rng.normal(size=(m, n)) * rng.uniform(0.1, 3.0)
        v = rng.normal(size=n) * rng.uniform(0.1, 5.0)
        worst = max(worst, abs(wasserstein2(cloud, cloud + v).distance - float(np.linalg.norm(v))))
    ok = exact == 1.0 and worst <= 1e-10
    return CriterionResult(9, "measure correctness", ok, {"two_point": exact, "translation_error": worst})


def criterion_10(workers: int = 2) -> CriterionResult:
    """Repeated ``solve`` runs give byte-identical residual CSVs for 1 and ``workers`` threads."""
    from .cli import main
    from .io import RESIDUALS

    config = Path(__file__).parent / "examples" / "lq.yaml"
    with tempfile.TemporaryDirectory() as tmp:
        runs = []
        for i, w in enumerate((1, 1, max(2, workers))):
            out = Path(tmp) / f"run{i}"
            code = main(["solve", "--config", str(config), "--out", str(out), "--workers", str(w)])
            runs.append((code, (out / RESIDUALS).read_bytes()))
    same = all(r[1] == runs[0][1] for r in runs)
    ok = same and all(r[0] == 0 for r in runs)
    return CriterionResult(10, "determinism", ok, {"identical": same, "exit_codes": [r[0] for r in runs], "csv_bytes": len(runs[0][1])})


CRITERIA: dict[int, Callable[..., CriterionResult]] = {
    1: criterion_1,
    2: criterion_2,
    3: criterion_3,
    4: criterion_4,
    5: criterion_5,
    6: criterion_6,
    7: criterion_7,
    8: criterion_8,
    9: criterion_9,
    10: criterion_10,
}


def run_criterion(number: int, workers: int = 1) -> CriterionResult:
    t0 = time.perf_counter()
    fn = CRITERIA[number]
    res = fn(workers=max(2, workers)) if number == 10 else fn(workers=workers)
    return replace(res, elapsed=time.perf_counter() - t0)


def run_acceptance(numbers=None, workers: int = 1, echo: Callable[[str], None] | None = None) -> list[CriterionResult]:
    results = []
    for n in numbers or sorted(CRITERIA):
        res = run_criterion(n, workers)
        if echo:
            echo(res.line())
        results.append(res)
    return results
