"""Particle solver for constrained mean-field control with singular controls."""

from __future__ import annotations

__version__ = "0.1.0"

from .forward import BrownianGrid, ControlField, ParticleEnsemble, TimeGrid, simulate_forward  # noqa: E402
from .measure import moment_stats, wasserstein2  # noqa: E402
from .picard import Solution, SolverOptions, solve, stability_probe, uniqueness_probe  # noqa: E402
from .problem import InitialLaw, ProblemSpec, build_family, validate_spec  # noqa: E402

__all__ = [
    "BrownianGrid",
    "ControlField",
    "InitialLaw",
    "ParticleEnsemble",
    "ProblemSpec",
    "Solution",
    "SolverOptions",
    "TimeGrid",
    "__version__",
    "build_family",
    "moment_stats",
    "simulate_forward",
    "solve",
    "stability_probe",
    "uniqueness_probe",
    "validate_spec",
    "wasserstein2",
]
