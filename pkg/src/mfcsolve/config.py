"""Run configuration: YAML schema, validation and round-trip serialisation.

A config file is a tree with the sections ``problem``, ``solver``, ``oracle``,
``validate``, ``uniqueness``, ``stability`` and ``output`` plus a top-level
``seed``. Every section is optional except ``problem.family``. Errors carry
the dotted key path and, when known, the line and column in the file.
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .picard import SolverOptions
from .problem import build_family, control_set_from_config, initial_law_from_config
from .problem.families import CONSTRAINT_KEYS, FAMILIES, SINGULAR_KEYS, family_keys
from .problem.spec import ProblemSpec


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit code 2."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None, col: int | None = None):
        self.path, self.line, self.col = path, line, col
        where = f" (line {line}, column {col})" if line is not None else ""
        prefix = f"{path}: " if path else ""
        super().__init__(f"{prefix}{message}{where}")


@dataclass(frozen=True)
class ProblemConfig:
    family: str
    params: dict = field(default_factory=dict)
    horizon: float = 1.0
    control_set: dict = field(default_factory=lambda: {"type": "reals"})
    initial_law: dict = field(default_factory=lambda: {"type": "dirac", "loc": 0.0})
    moment_order: float = 4.0


@dataclass(frozen=True)
class OracleConfig:
    steps: int = 10
    particles: int = 200
    refine: int = 20


@dataclass(frozen=True)
class ValidateConfig:
    probes: int = 200


@dataclass(frozen=True)
class UniquenessConfig:
    starts: int = 3


@dataclass(frozen=True)
class StabilityConfig:
    epsilons: tuple[float, ...] = (0.2, 0.1, 0.05)


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemConfig
    solver: SolverOptions = field(default_factory=SolverOptions)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    validate: ValidateConfig = field(default_factory=ValidateConfig)
    uniqueness: UniquenessConfig = field(default_factory=UniquenessConfig)
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    output_dir: str = "out"
    seed: int = 0

    def with_overrides(self, *, seed: int | None = None, workers: int | None = None, output_dir: str | None = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed), solver=replace(cfg.solver, seed=int(seed)))
        if workers is not None:
            cfg = replace(cfg, solver=replace(cfg.solver, workers=int(workers)))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=str(output_dir))
        return cfg

    def build_spec(self) -> ProblemSpec:
        return build_problem(self.problem)

    def to_dict(self) -> dict:
        """Every effective option, in the layout accepted by :func:`parse_config`."""
        solver = {f.name: getattr(self.solver, f.name) for f in fields(SolverOptions) if f.name != "seed"}
        p = self.problem
        return {
            "seed": self.seed,
            "problem": {
                "family": p.family,
                "params": _plain(p.params),
                "horizon": p.horizon,
                "control_set": _plain(p.control_set),
                "initial_law": _plain(p.initial_law),
                "moment_order": p.moment_order,
            },
            "solver": solver,
            "oracle": _section_dict(self.oracle),
            "validate": _section_dict(self.validate),
            "uniqueness": _section_dict(self.uniqueness),
            "stability": {"epsilons": list(self.stability.epsilons)},
            "output": {"dir": self.output_dir},
        }


def _section_dict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# ------------------------------------------------------------------ parsing

_SECTIONS = {
    "problem": {f.name for f in fields(ProblemConfig)},
    "solver": {f.name for f in fields(SolverOptions)} - {"seed"},
    "oracle": {f.name for f in fields(OracleConfig)},
    "validate": {f.name for f in fields(ValidateConfig)},
    "uniqueness": {f.name for f in fields(UniquenessConfig)},
    "stability": {f.name for f in fields(StabilityConfig)},
    "output": {"dir"},
}
_TOP = set(_SECTIONS) | {"seed"}
_CONTROL_SET_KEYS = {"type", "low", "high", "center", "radius", "normals", "offsets"}
_LAW_KEYS = {"type", "loc", "scale", "shift"}

# solver keys that must be strictly positive / nonnegative
_POSITIVE = {"steps", "particles", "max_outer", "tol_vi", "tol_comp", "tol_bsde", "tol_fix", "degree", "rho_eta", "rho_zeta", "patience", "min_theta", "workers", "reset_factor"}
_NONNEGATIVE = {"ridge", "anderson", "lipschitz", "init_seed"}


class _Context:
    def __init__(self, marks: dict):
        self.marks = marks

    def error(self, message: str, path: tuple[str, ...]) -> ConfigError:
        line, col = self.marks.get(path, (None, None))
        return ConfigError(message, ".".join(path) or None, line, col)

    def check_keys(self, tree: dict, allowed: set[str], path: tuple[str, ...]):
        for key in tree:
            if key not in allowed:
                hint = difflib.get_close_matches(str(key), sorted(allowed), n=1)
                suggestion = f"; did you mean {'.'.join(path + (hint[0],))!r}?" if hint else ""
                raise self.error(f"unknown key{suggestion}", path + (str(key),))

    def section(self, tree: dict, name: str) -> dict:
        value = tree.get(name, {})
        if value is None:
            return {}
        if not isinstance(value, dict):
            raise self.error("expected a mapping", (name,))
        self.check_keys(value, _SECTIONS[name], (name,))
        return value


def _mark_map(node, path=(), out=None) -> dict:
    """Map every key path to its 1-based ``(line, column)``; rejects duplicate keys."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        seen = set()
        for key_node, value_node in node.value:
            key = str(key_node.value)
            p = path + (key,)
            mark = (key_node.start_mark.line + 1, key_node.start_mark.column + 1)
            if key in seen:
                raise ConfigError("duplicate key", ".".join(p), *mark)
            seen.add(key)
            out[p] = mark
            _mark_map(value_node, p, out)
    return out


def _number(ctx: _Context, value, path, kind, *, positive=False, nonnegative=False, nullable=False):
    if value is None and nullable:
        return None
    if isinstance(value, bool):
        raise ctx.error(f"expected {kind.__name__}, got a boolean", path)
    if kind is float and isinstance(value, str):
        # YAML 1.1 reads '1e-6' (no dot) as a string
        try:
            value = float(value)
        except ValueError:
            raise ctx.error(f"expected a number, got {value!r}", path) from None
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ctx.error(f"expected {kind.__name__}, got {type(value).__name__}", path)
    if value != value:
        raise ctx.error("must not be NaN", path)
    if positive and not value > 0:
        raise ctx.error("must be positive", path)
    if nonnegative and not value >= 0:
        raise ctx.error("must be nonnegative", path)
    return value


def _parse_solver(ctx: _Context, tree: dict, seed: int) -> SolverOptions:
    raw = ctx.section(tree, "solver")
    values = {}
    for f in fields(SolverOptions):
        if f.name not in raw:
            continue
        path = ("solver", f.name)
        default = f.default
        value = raw[f.name]
        if isinstance(default, str):
            if not isinstance(value, str):
                raise ctx.error("expected a string", path)
        else:
            kind = int if isinstance(default, int) or f.name == "init_seed" else float
            value = _number(
                ctx,
                value,
                path,
                kind,
                positive=f.name in _POSITIVE,
                nonnegative=f.name in _NONNEGATIVE,
                nullable=default is None,
            )
        values[f.name] = value
    try:
        return SolverOptions(seed=seed, **values)
    except ValueError as exc:
        raise ctx.error(str(exc), ("solver",)) from None


def _parse_params(ctx: _Context, family: str, params) -> dict:
    path = ("problem", "params")
    if params is None:
        return {}
    if not isinstance(params, dict):
        raise ctx.error("expected a mapping", path)
    ctx.check_keys(params, family_keys(family), path)
    for block, keys in (("constraint", CONSTRAINT_KEYS), ("singular", SINGULAR_KEYS)):
        if block in params:
            if not isinstance(params[block], dict):
                raise ctx.error("expected a mapping", path + (block,))
            ctx.check_keys(params[block], set(keys), path + (block,))
    for block, required in (("constraint", ("A",)), ("singular", ("G", "c"))):
        if block in family_keys(family):
            if block not in params:
                raise ctx.error(f"family {family!r} requires this block", path + (block,))
            for key in required:
                if key not in params[block]:
                    raise ctx.error("missing required key", path + (block, key))
    return params


def _parse_problem(ctx: _Context, tree: dict) -> ProblemConfig:
    if "problem" not in tree:
        raise ctx.error("missing required section", ("problem",))
    raw = ctx.section(tree, "problem")
    if "family" not in raw:
        raise ctx.error("missing required key", ("problem", "family"))
    family = raw["family"]
    if family not in FAMILIES:
        hint = difflib.get_close_matches(str(family), sorted(FAMILIES), n=1)
        extra = f"; did you mean {hint[0]!r}?" if hint else f"; known: {sorted(FAMILIES)}"
        raise ctx.error(f"unknown family {family!r}{extra}", ("problem", "family"))
    defaults = ProblemConfig(family)
    cfg = ProblemConfig(
        family=family,
        params=_parse_params(ctx, family, raw.get("params")),
        horizon=_number(ctx, raw.get("horizon", defaults.horizon), ("problem", "horizon"), float, positive=True),
        control_set=raw.get("control_set", defaults.control_set),
        initial_law=raw.get("initial_law", defaults.initial_law),
        moment_order=_number(ctx, raw.get("moment_order", defaults.moment_order), ("problem", "moment_order"), float, positive=True),
    )
    for key, allowed in (("control_set", _CONTROL_SET_KEYS), ("initial_law", _LAW_KEYS)):
        if not isinstance(getattr(cfg, key), dict):
            raise ctx.error("expected a mapping", ("problem", key))
        ctx.check_keys(getattr(cfg, key), allowed, ("problem", key))
    try:
        build_problem(cfg)
    except (KeyError, ValueError, TypeError) as exc:
        msg = exc.args[0] if exc.args else str(exc)
        raise ctx.error(f"invalid problem definition: {msg}", ("problem",)) from None
    return cfg


def _parse_tree(tree, marks: dict) -> RunConfig:
    ctx = _Context(marks)
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError("top level must be a mapping")
    ctx.check_keys(tree, _TOP, ())
    seed = _number(ctx, tree.get("seed", 0), ("seed",), int, nonnegative=True)
    problem = _parse_problem(ctx, tree)
    solver = _parse_solver(ctx, tree, seed)

    def simple(name, cls, kinds):
        raw = ctx.section(tree, name)
        values = {k: _number(ctx, raw[k], (name, k), kinds[k], positive=True) for k in raw}
        return cls(**values)

    oracle = simple("oracle", OracleConfig, {"steps": int, "particles": int, "refine": int})
    validate = simple("validate", ValidateConfig, {"probes": int})
    uniqueness = simple("uniqueness", UniquenessConfig, {"starts": int})
    raw = ctx.section(tree, "stability")
    eps = raw.get("epsilons", list(StabilityConfig().epsilons))
    if not isinstance(eps, list) or not eps:
        raise ctx.error("expected a nonempty list", ("stability", "epsilons"))
    eps = tuple(_number(ctx, e, ("stability", "epsilons"), float, positive=True) for e in eps)
    out = ctx.section(tree, "output")
    out_dir = out.get("dir", "out")
    if not isinstance(out_dir, str):
        raise ctx.error("expected a string", ("output", "dir"))
    return RunConfig(problem, solver, oracle, validate, uniqueness, StabilityConfig(eps), out_dir, seed)


def parse_config_text(text: str) -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        tree = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line, col = (mark.line + 1, mark.column + 1) if mark else (None, None)
        raise ConfigError(f"parse error: {exc.problem or exc.context}", None, line, col) from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"parse error: {exc}") from None
    return _parse_tree(tree, _mark_map(node) if node is not None else {})


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config file is not valid UTF-8: {exc.reason}") from None
    return parse_config_text(text)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=False)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")


def build_problem(p: ProblemConfig) -> ProblemSpec:
    spec_dim = int(p.params.get("dim", 1))
    return build_family(
        p.family,
        p.params,
        horizon=p.horizon,
        control_set=control_set_from_config(p.control_set, spec_dim),
        initial_law=initial_law_from_config(p.initial_law, spec_dim),
        moment_order=p.moment_order,
    )
