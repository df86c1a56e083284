"""Command-line entry point.

``mfcsolve <subcommand> --config <path> [--out <dir>] [--seed <u64>] [--workers <int>]``

Exit codes: 0 converged or passed, 1 runtime abort, 2 configuration error,
3 not converged or check failed.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig, parse_config
from .forward import TimeGrid
from .oracle import LQSpec, compare, discrete_nlp, riccati_feedback, riccati_lq
from .picard import SolverOptions, solve, stability_probe, uniqueness_probe
from .problem import validate_spec

EXIT_OK, EXIT_ABORT, EXIT_CONFIG, EXIT_NOT_CONVERGED = 0, 1, 2, 3

SUBCOMMANDS = ("solve", "validate", "oracle", "uniqueness", "stability", "bench")


def _status_code(ok: bool) -> int:
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


def cmd_solve(cfg: RunConfig, out: Path, echo) -> int:
    sol = solve(cfg.build_spec(), cfg.solver)
    sol.report.write_csv(out / io.RESIDUALS)
    io.write_json(out / io.SUMMARY, sol.summary())
    echo(f"status {sol.report.status} after {sol.report.iterations} iterations, cost {sol.cost:.10g}")
    return _status_code(sol.report.status == "converged")


def cmd_validate(cfg: RunConfig, out: Path, echo) -> int:
    report = validate_spec(cfg.build_spec(), probes=cfg.validate.probes, seed=cfg.seed, grid_steps=cfg.solver.steps)
    io.write_json(out / "validation.json", report.as_dict())
    flagged = report.flagged
    echo(f"guarantee: {report.guarantee}; flagged: {', '.join(flagged) if flagged else 'none'}")
    return EXIT_OK  # validation reports, it never fails the run


def cmd_oracle(cfg: RunConfig, out: Path, echo) -> int:
    spec = cfg.build_spec()
    try:
        lq = LQSpec.from_spec(spec)
    except ValueError:
        lq = None
    if lq is not None:
        sol = solve(spec, cfg.solver)
        oracle = riccati_lq(lq, TimeGrid(spec.horizon, cfg.solver.steps), spec.initial_law, cfg.oracle.refine, x0=sol.ensemble.X[0])
        gap = compare(sol, oracle, alpha_ref=riccati_feedback(oracle, sol.ensemble.X))
        kind, bound = "riccati", 0.02
        passed = gap.cost_gap <= bound and gap.control_gap <= bound
    else:
        opts = replace(cfg.solver, steps=cfg.oracle.steps, particles=cfg.oracle.particles)
        sol = solve(spec, opts)
        oracle = discrete_nlp(spec, opts.steps, opts.particles, cfg.seed, init_seed=opts.resolved_init_seed)
        gap = compare(sol, oracle)
        kind, bound = "nlp", 0.01
        agreements = [a for a in (gap.state_agreement, gap.singular_agreement) if a is not None]
        passed = gap.cost_gap <= bound and all(a >= 0.9 for a in agreements)
    doc = {
        "oracle": kind,
        "solver_status": sol.report.status,
        "solver_cost": sol.cost,
        "oracle_cost": oracle.cost,
        "oracle_status": oracle.status,
        **gap.as_dict(),
        "cost_bound": bound,
        "passed": passed,
    }
    if kind == "riccati":
        doc["oracle_cost_initial_law"] = oracle.info["cost_law"]
    io.write_json(out / io.GAP_REPORT, doc)
    sol.report.write_csv(out / io.RESIDUALS)
    echo(f"{kind} oracle: cost gap {gap.cost_gap:.3g}, control gap {gap.control_gap:.3g}, {'pass' if passed else 'fail'}")
    return _status_code(passed and sol.report.status == "converged")


def cmd_uniqueness(cfg: RunConfig, out: Path, echo) -> int:
    spec = cfg.build_spec()
    report = validate_spec(spec, probes=cfg.validate.probes, seed=cfg.seed, grid_steps=cfg.solver.steps)
    res = uniqueness_probe(spec, cfg.solver, cfg.uniqueness.starts, seed=cfg.seed)
    bound = 10 * cfg.solver.tol_fix
    doc = {
        "max_distance": res.max_distance,
        "bound": bound,
        "distances": res.distances,
        "statuses": res.statuses,
        "guarantee": report.guarantee,
        "flagged": report.flagged,
    }
    io.write_json(out / "uniqueness.json", doc)
    echo(f"max pairwise distance {res.max_distance:.3g} (bound {bound:.3g}); guarantee {report.guarantee}")
    return _status_code(res.max_distance <= bound and all(s == "converged" for s in res.statuses))


def cmd_stability(cfg: RunConfig, out: Path, echo) -> int:
    spec = cfg.build_spec()
    rows = []
    for eps in cfg.stability.epsilons:
        res = stability_probe(spec, cfg.solver, spec.initial_law, spec.initial_law.shifted(eps))
        rows.append({"epsilon": eps, "numerator": res.numerator, "denominator": res.denominator, "ratio": res.ratio, "statuses": list(res.statuses)})
        echo(f"epsilon {eps:g}: ratio {res.ratio:.6g}")
    ratios = np.array([r["ratio"] for r in rows])
    finite = bool(np.all(np.isfinite(ratios)))
    spread = float(ratios.max() / ratios.min()) if finite and np.all(ratios > 0) else float("inf")
    converged = all(s == "converged" for r in rows for s in r["statuses"])
    io.write_json(out / "stability.json", {"runs": rows, "spread": spread})
    return _status_code(finite and spread < 2.0 and converged)


def cmd_bench(cfg: RunConfig, out: Path, echo, criteria=None) -> int:
    from .acceptance import run_acceptance

    results = run_acceptance(criteria, workers=cfg.solver.workers, echo=echo)
    doc = [{"criterion": r.number, "name": r.name, "passed": r.passed, "seconds": r.elapsed, "details": r.details} for r in results]
    io.write_json(out / "bench.json", doc)
    return _status_code(all(r.passed for r in results))


COMMANDS = {
    "solve": cmd_solve,
    "validate": cmd_validate,
    "oracle": cmd_oracle,
    "uniqueness": cmd_uniqueness,
    "stability": cmd_stability,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfcsolve", description="Particle solver for constrained mean-field control.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "bench", help="YAML run configuration")
        p.add_argument("--out", help="output directory (default: output.dir from the config)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--workers", type=int, help="worker threads for particle-parallel stages")
        if name == "bench":
            p.add_argument("--criteria", type=int, nargs="+", help="run only these acceptance criteria")
    return parser


def run(command: str, cfg: RunConfig, *, criteria=None, echo=print) -> int:
    """Execute one subcommand on a validated config and write its outputs."""
    out = io.output_dir(cfg.output_dir)
    io.write_manifest(out, cfg, command)
    if command == "bench":
        return cmd_bench(cfg, out, echo, criteria)
    return COMMANDS[command](cfg, out, echo)


def _bench_config() -> RunConfig:
    from .config import ProblemConfig

    return RunConfig(ProblemConfig("lq"), SolverOptions())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("must be a nonnegative integer", "--seed")
        if args.workers is not None and args.workers < 1:
            raise ConfigError("must be a positive integer", "--workers")
        cfg = parse_config(args.config) if args.config else _bench_config()
        cfg = cfg.with_overrides(seed=args.seed, workers=args.workers, output_dir=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run(args.command, cfg, criteria=getattr(args, "criteria", None))
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to one exit code
        print(f"aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
