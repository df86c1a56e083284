from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

import mfcsolve
from mfcsolve import io
from mfcsolve.cli import EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_OK, main
from mfcsolve.config import (
    ConfigError,
    OracleConfig,
    ProblemConfig,
    RunConfig,
    StabilityConfig,
    dump_config,
    parse_config,
    parse_config_text,
)
from mfcsolve.picard import SolverOptions

EXAMPLES = Path(mfcsolve.__file__).parent / "examples"

MINIMAL = """
problem:
  family: lq
"""


def test_minimal_config_defaults():
    cfg = parse_config_text(MINIMAL)
    assert cfg.solver == SolverOptions()
    assert cfg.solver.theta == 0.5 and cfg.solver.degree == 2 and cfg.solver.mode == "kkt"
    assert cfg.problem == ProblemConfig("lq")
    assert cfg.seed == 0 and cfg.output_dir == "out"
    assert cfg.build_spec().name == "lq"


def test_negative_particles_names_the_key():
    with pytest.raises(ConfigError) as info:
        parse_config_text(MINIMAL + "solver:\n  particles: -5\n")
    assert info.value.path == "solver.particles"
    assert "solver.particles" in str(info.value) and "positive" in str(info.value)
    assert (info.value.line, info.value.col) == (5, 3)


def test_unknown_key_suggests_nearest():
    with pytest.raises(ConfigError) as info:
        parse_config_text(MINIMAL + "solver:\n  particels: 100\n")
    assert "did you mean 'solver.particles'?" in str(info.value)
    with pytest.raises(ConfigError, match="problem.params.sigma0"):
        parse_config_text(MINIMAL + "  params: {sigm0: 0.5}\n")


@pytest.mark.parametrize(
    "text, path",
    [
        ("seed: 0\n", "problem"),
        ("problem: {family: nope}\n", "problem.family"),
        (MINIMAL + "  initial_law: {type: normal, loc: 1.0, sigma: 2}\n", "problem.initial_law.sigma"),
        (MINIMAL + "solver:\n  theta: yes\n", "solver.theta"),
        (MINIMAL + "solver:\n  steps: 1.5\n", "solver.steps"),
        (MINIMAL + "seed: -1\n", "seed"),
    ],
)
def test_schema_violations(text, path):
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert info.value.path == path


def test_parse_errors_carry_position():
    with pytest.raises(ConfigError) as info:
        parse_config_text("problem: [unclosed\n")
    assert info.value.line is not None
    with pytest.raises(ConfigError, match="duplicate key"):
        parse_config_text(MINIMAL + "  family: lq\n")


def test_scientific_notation_is_accepted():
    assert parse_config_text(MINIMAL + "solver:\n  tol_fix: 1e-4\n").solver.tol_fix == 1e-4


def test_bundled_examples_parse():
    names = sorted(p.name for p in EXAMPLES.glob("*.yaml"))
    assert names == ["a5_violation.yaml", "constrained.yaml", "constrained_singular.yaml", "hard.yaml", "lq.yaml", "singular.yaml"]
    for path in EXAMPLES.glob("*.yaml"):
        parse_config(path).build_spec()


solver_options = st.builds(
    SolverOptions,
    steps=st.integers(2, 500),
    particles=st.integers(1, 10**5),
    theta=st.floats(0.01, 1.0),
    max_outer=st.integers(1, 5000),
    tol_fix=st.floats(1e-12, 1.0),
    degree=st.integers(1, 4),
    ridge=st.floats(0.0, 1.0),
    basis=st.sampled_from(["auto", "polynomial", "pathwise"]),
    mode=st.sampled_from(["kkt", "fj"]),
    rho_eta=st.one_of(st.none(), st.floats(0.01, 10.0)),
    init_seed=st.one_of(st.none(), st.integers(0, 2**32)),
    anderson=st.integers(0, 10),
    workers=st.integers(1, 8),
)
problems = st.one_of(
    st.builds(
        ProblemConfig,
        family=st.just("lq"),
        params=st.fixed_dictionaries({}, optional={"a": st.floats(-2, 2), "sigma0": st.floats(0, 1), "qbar": st.floats(0, 1)}),
        horizon=st.floats(0.1, 5.0),
        initial_law=st.sampled_from([{"type": "dirac", "loc": 0.0}, {"type": "normal", "loc": 1.0, "scale": 0.5}]),
    ),
    st.builds(
        ProblemConfig,
        family=st.just("lq_constrained_singular"),
        params=st.builds(
            lambda c, g: {"constraint": {"A": [[1.0]], "C": c}, "singular": {"G": g, "c": 0.3}},
            st.floats(-2, 2),
            st.floats(0.1, 2),
        ),
        control_set=st.just({"type": "box", "low": -1.0, "high": 1.0}),
    ),
)


@given(problems, solver_options, st.integers(0, 2**63), st.lists(st.floats(0.01, 1.0), min_size=1, max_size=4))
def test_config_round_trip(problem, solver, seed, eps):
    cfg = RunConfig(
        problem,
        solver=SolverOptions(**{**solver.__dict__, "seed": seed}),
        oracle=OracleConfig(steps=5, particles=50),
        stability=StabilityConfig(tuple(eps)),
        output_dir="results/run",
        seed=seed,
    )
    assert parse_config_text(dump_config(cfg)) == cfg


def _write(tmp_path, text):
    path = tmp_path / "cfg.yaml"
    path.write_text(text)
    return str(path)


def test_cli_solve_writes_outputs(tmp_path):
    out = tmp_path / "out"
    assert main(["solve", "--config", str(EXAMPLES / "lq.yaml"), "--out", str(out)]) == EXIT_OK
    with open(out / io.RESIDUALS, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "vi", "comp_state", "comp_singular", "dualfeas", "primalfeas", "bsde", "control_change", "cost"]
    summary = json.loads((out / io.SUMMARY).read_text())
    assert summary["status"] == "converged"
    manifest = yaml.safe_load((out / io.MANIFEST).read_text())
    assert manifest["subcommand"] == "solve"
    assert manifest["config"]["solver"]["particles"] == 1000
    # the manifest echoes a config that parses back to the effective one
    assert parse_config_text(yaml.safe_dump(manifest["config"])) == parse_config(EXAMPLES / "lq.yaml").with_overrides(output_dir=str(out))


def test_cli_solve_is_reproducible(tmp_path):
    outs = [tmp_path / f"run{i}" for i in range(2)]
    for out, workers in zip(outs, ("1", "2")):
        assert main(["solve", "--config", str(EXAMPLES / "lq.yaml"), "--out", str(out), "--workers", workers]) == EXIT_OK
    assert (outs[0] / io.RESIDUALS).read_bytes() == (outs[1] / io.RESIDUALS).read_bytes()


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["solve", "--config", str(EXAMPLES / "hard.yaml"), "--out", str(tmp_path / "hard")]) == EXIT_NOT_CONVERGED
    bad = _write(tmp_path, MINIMAL + "solver:\n  particles: -1\n")
    assert main(["solve", "--config", bad, "--out", str(tmp_path / "bad")]) == EXIT_CONFIG
    assert "solver.particles" in capsys.readouterr().err
    assert main(["solve", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    assert main(["solve", "--config", str(EXAMPLES / "lq.yaml"), "--workers", "0"]) == EXIT_CONFIG


def test_cli_validate_never_fails(tmp_path):
    out = tmp_path / "val"
    assert main(["validate", "--config", str(EXAMPLES / "a5_violation.yaml"), "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "validation.json").read_text())
    assert "A5" in report["flagged"]


def test_cli_runtime_abort(tmp_path):
    # explosive growth overflows the forward scheme
    text = """
problem:
  family: lq
  params: {a: 1.0e+60, bhat: 0.0, sigma0: 1.0}
  horizon: 10.0
  initial_law: {type: normal, loc: 1.0, scale: 1.0}
solver: {steps: 10, particles: 50, max_outer: 2}
"""
    assert main(["solve", "--config", _write(tmp_path, text), "--out", str(tmp_path / "abort")]) == 1


def test_cli_oracle_on_small_constrained(tmp_path):
    text = """
problem:
  family: lq_constrained
  params: {a: 1.0, constraint: {A: [[1.0]], C: -0.8}}
  initial_law: {type: uniform, loc: 0.8, scale: 0.8}
solver: {steps: 10, particles: 100, max_outer: 1000}
oracle: {steps: 10, particles: 100}
"""
    out = tmp_path / "oracle"
    assert main(["oracle", "--config", _write(tmp_path, text), "--out", str(out)]) == EXIT_OK
    gap = json.loads((out / io.GAP_REPORT).read_text())
    assert gap["oracle"] == "nlp" and gap["passed"] and gap["cost_gap"] <= 0.01
