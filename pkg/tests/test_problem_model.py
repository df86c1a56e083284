from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_spec, mu_of
from mfcsolve.problem import Ball, Box, HalfSpaces, InitialLaw, LinearConstraint, Reals, build_family, validate_spec
from mfcsolve.problem.spec import CoefficientError

finite = st.floats(-50, 50, allow_nan=False)


def test_lq_drift_is_the_control():
    spec = build_family("lq")
    assert spec.eval_drift(0.0, np.array([1.0]), mu_of(0.0), np.array([2.0])) == pytest.approx([2.0])


def test_zero_drift():
    spec = make_spec()
    assert np.all(spec.eval_drift(0.3, np.array([4.0]), mu_of(1.0), np.array([-2.0])) == 0.0)


def test_affine_drift_hand_value():
    spec = build_family("lq", {"a": 0.5, "abar": 0.3})
    out = spec.eval_drift(0.0, np.array([1.0]), mu_of(2.0), np.array([-1.0]))
    assert out == pytest.approx([0.1], abs=1e-15)


def test_non_finite_coefficient_is_rejected_by_name():
    spec = make_spec(drift=lambda t, x, mu, u: np.full_like(x, np.inf))
    with pytest.raises(CoefficientError, match="drift"):
        spec.eval_drift(0.0, np.zeros(1), mu_of(0.0), np.zeros(1))


def _linear(A, B, C):
    return build_family("lq_constrained", {"constraint": {"A": A, "B": B, "C": C}})


def test_linear_constraint_examples():
    assert _linear(1.0, 0.0, 0.0).eval_constraint(0, 0.0, np.array([0.7]), mu_of(0.0), np.zeros(1)) == pytest.approx(0.7)
    assert _linear(1.0, -1.0, 0.0).eval_constraint(0, 0.0, np.array([1.3]), mu_of(1.3), np.zeros(1)) == pytest.approx(0.0)
    assert _linear(2.0, 1.0, -0.5).eval_constraint(0, 0.0, np.array([0.25]), mu_of(0.5), np.zeros(1)) == pytest.approx(0.5)


def test_constraint_index_out_of_range():
    with pytest.raises(IndexError):
        _linear(1.0, 0.0, 0.0).eval_constraint(1, 0.0, np.zeros(1), mu_of(0.0), np.zeros(1))


def test_linear_constraint_identity_on_random_probes(rng):
    A, B, C = rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=2)
    spec = build_family("lq_constrained", {"dim": 3, "constraint": {"A": A.tolist(), "B": B.tolist(), "C": C.tolist()}})
    x = rng.normal(size=(10_000, 3)) * 5
    mu = mu_of(rng.normal(size=3))
    u = rng.normal(size=(10_000, 3))
    ref = x @ A.T + mu.mean @ B.T + C
    assert np.max(np.abs(spec.eval_constraints(0.2, x, mu, u) - ref)) <= 1e-12


def test_box_and_ball_projection_examples():
    assert Box([-1.0], [1.0]).project(np.array([1.5])) == pytest.approx([1.0])
    assert Ball([0.0, 0.0], 1.0).project(np.array([3.0, 4.0])) == pytest.approx([0.6, 0.8])
    u = np.array([0.2])
    assert np.array_equal(Box([-1.0], [1.0]).project(u), u)


def test_halfspace_projection_is_a_feasible_nearest_point():
    hs = HalfSpaces(-np.eye(2), np.zeros(2))  # u >= 0 coordinatewise
    assert hs.project(np.array([-1.0, 2.0])) == pytest.approx([0.0, 2.0])


sets = [Reals(2), Box([-1.0, -2.0], [1.0, 0.5]), Ball([0.5, -0.5], 1.5), HalfSpaces(np.array([[1.0, 1.0], [1.0, -2.0]]), np.array([0.5, -1.0]))]


@given(st.lists(finite, min_size=4, max_size=4), st.integers(0, len(sets) - 1))
def test_projection_idempotent_and_nonexpansive(vals, which):
    cset = sets[which]
    u, v = np.array(vals[:2]), np.array(vals[2:])
    pu, pv = cset.project(u), cset.project(v)
    assert np.allclose(cset.project(pu), pu, atol=1e-10)
    assert np.linalg.norm(pu - pv) <= np.linalg.norm(u - v) + 1e-12
    assert bool(cset.contains(pu, tol=1e-9))


def test_coefficients_are_pure(rng):
    spec = build_family("lq", {"a": 0.2, "abar": -0.4, "qbar": 0.3, "sigma0": 0.5})
    x, u = rng.normal(size=(50, 1)), rng.normal(size=(50, 1))
    mu = mu_of(0.3, 1.0)
    for fn in (spec.eval_drift, spec.eval_diffusion, spec.eval_cost):
        assert np.array_equal(fn(0.1, x, mu, u), fn(0.1, x, mu, u))


def test_mustats_rejects_negative_variance():
    with pytest.raises(ValueError):
        mu_of(2.0, 1.0)


def test_validation_passes_on_box_lq():
    spec = build_family("lq", control_set=Box([-5.0], [5.0]))
    report = validate_spec(spec, probes=200)
    assert report.flagged == []
    assert report.guarantee == "full"
    assert report.checks["A2"].status == "unchecked"


def test_validation_flags_negative_singular_price():
    spec = build_family("lq_singular", {"singular": {"G": 1.0, "c": -0.1}}, control_set=Box([-5.0], [5.0]))
    report = validate_spec(spec, probes=100)
    assert report.checks["A5"].status == "flagged"
    assert report.guarantee == "best effort"


def test_validation_flags_concave_quartic_cost():
    # f = u^2/2 - u^4 is unbounded below in u
    spec = build_family("lq", {"kappa": -4.0})
    assert validate_spec(spec, probes=100).checks["A6"].status == "flagged"


def test_validation_needs_a_probe_budget():
    with pytest.raises(ValueError):
        validate_spec(build_family("lq"), probes=99)


def test_initial_law_moments():
    law = InitialLaw("uniform", (0.8,), (0.8,))
    assert law.mean == pytest.approx([1.2])
    assert law.variance == pytest.approx([0.8**2 / 12])
    assert law.shifted(0.5).mean == pytest.approx([1.7])


def test_linear_constraint_from_time_functions():
    lc = LinearConstraint(lambda t: np.array([[1.0 + t]]), lambda t: np.zeros((1, 1)), lambda t: np.array([-t]))
    spec = make_spec(constraint_count=1, linear_constraint=lc)
    assert spec.eval_constraint(0, 0.5, np.array([2.0]), mu_of(0.0), np.zeros(1)) == pytest.approx(2.5)
