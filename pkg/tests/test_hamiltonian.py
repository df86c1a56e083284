from __future__ import annotations

import numpy as np
import pytest
from conftest import make_spec, mu_of
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from mfcsolve.hamiltonian import (
    HamiltonianContext,
    check_gradients,
    eval_H,
    grad_u_H,
    grad_u_lagrangian,
    lions_term,
    minimize_H_in_u,
    vi_residual,
)
from mfcsolve.measure import moment_stats
from mfcsolve.problem import Box, build_family

MU0 = mu_of(0.0)


def _control_spec(control_set=None, sigma=0.0):
    """``b = u``, ``sigma`` constant, ``f = u^2 / 2``."""
    return make_spec(
        drift=lambda t, x, mu, u: u,
        diffusion=lambda t, x, mu, u: np.full((x.shape[0], 1, 1), sigma),
        cost=lambda t, x, mu, u: 0.5 * np.sum(u * u, axis=1),
        control_set=control_set,
    )


def test_eval_H_examples():
    ctx = HamiltonianContext(_control_spec(sigma=1.0))
    assert eval_H(ctx, 0.0, [0.0], MU0, [2.0], [3.0], [[0.5]]) == pytest.approx(8.5)
    assert eval_H(HamiltonianContext(make_spec()), 0.0, [0.0], MU0, [0.0], [0.0], [[0.0]]) == 0.0
    lq = build_family("lq", {"qbar": 1.0})
    assert eval_H(HamiltonianContext(lq), 0.0, [1.0], mu_of(2.0), [0.0], [0.0], [[0.0]]) == pytest.approx(2.5)


def test_grad_u_examples():
    ctx = HamiltonianContext(_control_spec())
    assert grad_u_lagrangian(ctx, 0.0, [0.0], MU0, [0.0], [1.0], [[0.0]]) == pytest.approx([1.0])
    # a control-free constraint leaves the gradient equal to grad_u H
    spec = build_family("lq_constrained", {"constraint": {"A": [[1.0]], "C": 0.5}})
    ctx = HamiltonianContext(spec)
    args = (0.3, [0.2], mu_of(0.1, 0.5), [0.7], [1.1], [[0.0]])
    np.testing.assert_array_equal(grad_u_lagrangian(ctx, *args, eta=[3.0]), grad_u_H(ctx, *args))
    np.testing.assert_array_equal(grad_u_lagrangian(ctx, *args, eta=[0.0]), grad_u_H(ctx, *args))


def test_grad_u_with_control_dependent_constraint():
    spec = make_spec(
        drift=lambda t, x, mu, u: u,
        cost=lambda t, x, mu, u: 0.5 * np.sum(u * u, axis=1),
        constraint_count=1,
        constraint=lambda t, x, mu, u: 1.0 - 2.0 * u,
    )
    g = grad_u_lagrangian(HamiltonianContext(spec), 0.0, [0.0], MU0, [0.5], [1.0], [[0.0]], eta=[0.25])
    assert g == pytest.approx([1.0 + 0.5 + 0.5])


def _mean_field_spec():
    return make_spec(
        drift=lambda t, x, mu, u: u + 0.2 * mu.mean + 0.1 * mu.m2 * x,
        diffusion=lambda t, x, mu, u: (0.3 + 0.05 * mu.m2 + 0.0 * x)[:, :, None],
        cost=lambda t, x, mu, u: 0.5 * x[:, 0] ** 2 + 0.7 * mu.mean[0] * x[:, 0] + 0.25 * mu.m2 * u[:, 0] ** 2,
    )


def _cloud_oracle(ctx, x, u, y, z, eps=1e-6):
    """``M * d/de`` of the cloud-averaged Hamiltonian when particle ``j`` moves by ``e``.

    Only the law argument is perturbed, which isolates the Lions derivative at ``x_j``.
    """
    m = x.shape[0]
    out = np.empty_like(x)
    for j in range(m):
        vals = []
        for s in (1.0, -1.0):
            xs = x.copy()
            xs[j] += s * eps
            vals.append(np.mean(eval_H(ctx, 0.0, x, moment_stats(xs), u, y, z)))
        out[j] = m * (vals[0] - vals[1]) / (2 * eps)
    return out


def test_lions_term_against_cloud_perturbation(rng):
    ctx = HamiltonianContext(_mean_field_spec())
    m = 12
    x, u, y = rng.normal(size=(m, 1)), rng.normal(size=(m, 1)), rng.normal(size=(m, 1))
    z = rng.normal(size=(m, 1, 1))
    mu = moment_stats(x)
    got = lions_term(ctx, 0.0, x, mu, u, y, z, part="H")
    np.testing.assert_allclose(got, _cloud_oracle(ctx, x, u, y, z), rtol=1e-6, atol=1e-7)


def test_lions_term_linear_mean_cost(rng):
    # f = qmx mean x gives E'[d_mean f'] = qmx * average(x')
    spec = build_family("lq", {"qmx": 0.8})
    x = rng.normal(size=(50, 1))
    zeros = np.zeros_like(x)
    got = lions_term(HamiltonianContext(spec), 0.0, x, moment_stats(x), zeros, zeros, zeros[:, :, None], part="H")
    np.testing.assert_allclose(got, np.full_like(x, 0.8 * x.mean()), atol=1e-14)


def test_lions_term_degenerate_cases(rng):
    spec = make_spec(cost=lambda t, x, mu, u: x[:, 0] ** 2, mean_field=False)
    x = rng.normal(size=(5, 1))
    assert np.all(lions_term(HamiltonianContext(spec), 0.0, x, moment_stats(x), x, x, x[:, :, None]) == 0.0)
    # one particle: the average is the pointwise moment derivative
    ctx = HamiltonianContext(_mean_field_spec())
    x1, u1, y1, z1 = np.array([[0.4]]), np.array([[0.9]]), np.array([[-0.3]]), np.array([[[0.2]]])
    mu = moment_stats(x1)
    got = lions_term(ctx, 0.0, x1, mu, u1, y1, z1, part="H")
    dmean = 0.2 * y1[0, 0] + 0.7 * x1[0, 0]
    dm2 = 0.1 * x1[0, 0] * y1[0, 0] + 0.05 * z1[0, 0, 0] + 0.25 * u1[0, 0] ** 2
    assert got[0, 0] == pytest.approx(dmean + 2 * x1[0, 0] * dm2, rel=1e-6)


def test_minimize_closed_form_examples():
    ctx = HamiltonianContext(_control_spec())
    u, ok = minimize_H_in_u(ctx, 0.0, [0.0], MU0, [2.5], [[0.0]])
    assert ok and u == pytest.approx([-2.5])
    boxed = HamiltonianContext(_control_spec(Box([-1.0], [1.0])))
    u, _ = minimize_H_in_u(boxed, 0.0, [0.0], MU0, [5.0], [[0.0]])
    assert u == pytest.approx([-1.0])


def test_minimize_quartic_matches_bisection():
    spec = build_family("lq", {"q": 0.0, "kappa": 1.0})
    assert spec.control_argmin is None
    u, ok = minimize_H_in_u(HamiltonianContext(spec), 0.0, [0.0], MU0, [1.0], [[0.0]])
    root = brentq(lambda v: v**3 + v + 1.0, -2.0, 0.0, xtol=1e-14)
    assert ok and u[0] == pytest.approx(root, abs=1e-8)
    assert root == pytest.approx(-0.6823, abs=1e-4)


def test_vi_residual_examples():
    spec = _control_spec(Box([-1.0], [1.0]))
    ctx = HamiltonianContext(spec)
    times = np.array([0.0])
    X, mus, Z = np.zeros((1, 1, 1)), [MU0], np.zeros((1, 1, 1, 1))
    # interior: gradient y + u = 0.2 + 0.1
    assert vi_residual(ctx, times, X, mus, np.full((1, 1, 1), 0.1), np.full((1, 1, 1), 0.2), Z) == pytest.approx(0.3)
    # clamped at the upper bound with gradient -2
    assert vi_residual(ctx, times, X, mus, np.ones((1, 1, 1)), np.full((1, 1, 1), -3.0), Z) == 0.0


def test_vi_residual_vanishes_at_minimiser(rng):
    spec = build_family("lq", {"kappa": 0.5, "sigma0": 0.2}, control_set=Box([-0.5], [0.8]))
    ctx = HamiltonianContext(spec)
    steps, m = 3, 40
    X, Y = rng.normal(size=(steps, m, 1)), 3 * rng.normal(size=(steps, m, 1))
    Z = rng.normal(size=(steps, m, 1, 1))
    mus = [moment_stats(X[k]) for k in range(steps)]
    alpha = np.stack([minimize_H_in_u(ctx, 0.0, X[k], mus[k], Y[k], Z[k])[0] for k in range(steps)])
    assert vi_residual(ctx, np.zeros(steps), X, mus, alpha, Y, Z) <= 1e-10


def test_gradient_check_on_families():
    for params in ({"kappa": 0.3, "sigma1": 0.4, "abar": 0.2, "qmx": 0.5}, {"q": 2.0, "x_ref": 0.3, "dim": 2}):
        worst = check_gradients(HamiltonianContext(build_family("lq", params)), probes=1000, seed=1)
        assert max(worst.values()) < 1e-5


@given(st.floats(-20, 20), st.floats(0.05, 1.0))
def test_minimiser_satisfies_pointwise_vi(y, r0):
    spec = build_family("lq", {"kappa": 1.0}, control_set=Box([-0.7], [1.2]))
    ctx = HamiltonianContext(spec, r0)
    u, ok = minimize_H_in_u(ctx, 0.0, [0.3], MU0, [y], [[0.0]])
    assert ok
    g = grad_u_H(ctx, 0.0, [0.3], MU0, u, [y], [[0.0]])
    v = np.random.default_rng(0).uniform(-0.7, 1.2, size=(100, 1))
    assert np.all((v - u) @ g >= -1e-6)


@given(st.floats(-5, 5), st.floats(-2, 2), st.floats(0.1, 1.0), st.floats(0.1, 1.0))
def test_argmin_scaling_invariance(y, z, r0, lam):
    spec = build_family("lq", {"kappa": 0.5, "sigma1": 0.3}, control_set=Box([-1.0], [1.0]))
    u1, _ = minimize_H_in_u(HamiltonianContext(spec, r0), 0.0, [0.4], MU0, [y], [[z]])
    u2, _ = minimize_H_in_u(HamiltonianContext(spec, r0 * lam), 0.0, [0.4], MU0, [lam * y], [[lam * z]])
    assert u2 == pytest.approx(u1, abs=1e-7)
