from .controlsets import Ball, Box, ControlSet, CustomSet, HalfSpaces, Reals, control_set_from_config
from .families import FAMILIES, build_family
from .laws import InitialLaw, initial_law_from_config
from .spec import (
    CoefficientError,
    Derivatives,
    LinearConstraint,
    MissingDerivativeError,
    MuStats,
    ProblemSpec,
)
from .validation import ValidationReport, validate_spec

__all__ = [
    "Ball",
    "Box",
    "CoefficientError",
    "ControlSet",
    "CustomSet",
    "Derivatives",
    "FAMILIES",
    "HalfSpaces",
    "InitialLaw",
    "LinearConstraint",
    "MissingDerivativeError",
    "MuStats",
    "ProblemSpec",
    "Reals",
    "ValidationReport",
    "build_family",
    "control_set_from_config",
    "initial_law_from_config",
    "validate_spec",
]
