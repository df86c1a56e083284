from __future__ import annotations

import numpy as np
import pytest
from conftest import make_spec

from mfcsolve.bsde import AdjointField, RegressionBasis, RegressionError, bsde_residual, solve_adjoint
from mfcsolve.forward import BrownianGrid, ControlField, TimeGrid, simulate_forward
from mfcsolve.hamiltonian import HamiltonianContext, grad_u_H
from mfcsolve.oracle import LQSpec, riccati_lq
from mfcsolve.picard import SolverOptions, discrete_cost, solve
from mfcsolve.problem import InitialLaw, build_family


def _ensemble(spec, steps=10, particles=200, seed=0, alpha=None):
    grid = TimeGrid(spec.horizon, steps)
    controls = ControlField.zeros(spec, steps, particles)
    if alpha is not None:
        controls = ControlField(alpha, controls.dzeta)
    return simulate_forward(spec, controls, BrownianGrid.generate(grid, particles, spec.noise_dim, seed), seed), controls


def test_null_bsde():
    spec = make_spec(
        diffusion=lambda t, x, mu, u: np.ones((x.shape[0], 1, 1)),
        law=InitialLaw("normal", (0.0,), (1.0,)),
    )
    ens, controls = _ensemble(spec)
    adj = solve_adjoint(spec, ens, controls)
    assert not adj.Y.any() and not adj.Z.any()
    assert bsde_residual(spec, ens, adj, controls) == 0.0


def test_constant_driver_integrates_exactly():
    kappa = 0.7
    spec = make_spec(
        cost=lambda t, x, mu, u: kappa * x[:, 0],
        diffusion=lambda t, x, mu, u: np.full((x.shape[0], 1, 1), 0.4),
        law=InitialLaw("normal", (0.0,), (1.0,)),
        mean_field=False,
    )
    ens, controls = _ensemble(spec, steps=20, particles=300)
    adj = solve_adjoint(spec, ens, controls, basis=RegressionBasis(2))
    assert np.all(adj.Y[-1] == 0.0)
    expected = kappa * (spec.horizon - ens.grid.times)
    np.testing.assert_allclose(adj.Y[:, :, 0], np.broadcast_to(expected[:, None], adj.Y.shape[:2]), atol=1e-12)


def test_martingale_sanity_with_zero_driver():
    # Y[k+1] is a martingale increment cloud; with zero driver its average is preserved
    spec = make_spec(diffusion=lambda t, x, mu, u: np.ones((x.shape[0], 1, 1)), law=InitialLaw("normal", (0.0,), (1.0,)))
    ens, controls = _ensemble(spec, steps=10, particles=2000)
    adj = AdjointField(np.zeros_like(ens.X), np.zeros((10, 2000, 1, 1)), np.zeros((10, 2000, 1)))
    adj.Y[-2] = ens.X[-2] ** 2  # arbitrary function of the state one step before T
    basis = RegressionBasis(2)
    from mfcsolve.bsde import _regressors

    regs = _regressors(basis, ens)
    for k in range(len(regs) - 2, -1, -1):
        adj.Y[k] = regs[k].fit(adj.Y[k + 1])
    means = adj.Y[:-1, :, 0].mean(axis=1)
    assert np.all(np.abs(means - means[-1]) <= 3 / np.sqrt(2000))


def test_residual_self_consistency_and_injected_fault():
    spec = build_family("lq", {"sigma0": 0.5, "qbar": 0.5, "abar": 0.2}, initial_law=InitialLaw("normal", (1.0,), (0.5,)))
    steps, m = 20, 300
    alpha = np.random.default_rng(1).normal(size=(steps, m, 1))
    ens, controls = _ensemble(spec, steps, m, alpha=alpha)
    adj = solve_adjoint(spec, ens, controls)
    assert bsde_residual(spec, ens, adj, controls) <= 1e-10
    rms_y = np.sqrt(np.mean(np.sum(adj.Y**2, axis=2)))
    bumped = AdjointField(adj.Y.copy(), adj.Z, adj.Ybar)
    bumped.Y[steps // 2] += 1.0
    assert bsde_residual(spec, ens, bumped, controls) >= 1 / np.sqrt(steps * m) / (1 + rms_y)


def test_terminal_pin_is_checked():
    spec = build_family("lq", {"sigma0": 0.3}, initial_law=InitialLaw("normal", (0.0,), (1.0,)))
    ens, controls = _ensemble(spec)
    adj = solve_adjoint(spec, ens, controls)
    adj.Y[-1] += 0.5
    assert bsde_residual(spec, ens, adj, controls) > 1e-3


def test_regression_needs_more_samples_than_columns():
    with pytest.raises(RegressionError) as info:
        RegressionBasis(3).regressor(np.random.default_rng(0).normal(size=(3, 1)), step=7)
    assert info.value.step == 7


def test_discrete_adjoint_gives_exact_cost_gradient(rng):
    # noise-free, so the pathwise basis is exact and the adjoint is the reverse-mode derivative
    spec = build_family(
        "lq",
        {"a": -0.3, "abar": 0.4, "qbar": 0.6, "qmx": 0.2, "kappa": 0.5},
        initial_law=InitialLaw("uniform", (-1.0,), (2.0,)),
    )
    steps, m = 8, 6
    alpha = rng.normal(size=(steps, m, 1))
    ens, controls = _ensemble(spec, steps, m, alpha=alpha)
    adj = solve_adjoint(spec, ens, controls)
    ctx = HamiltonianContext(spec)
    dt = ens.grid.dt
    analytic = np.stack(
        [dt / m * grad_u_H(ctx, ens.grid.times[k], ens.X[k], ens.mus[k], alpha[k], adj.Ybar[k], adj.Z[k]) for k in range(steps)]
    )
    noise = ens.noise
    x0 = ens.X[0]

    def cost(a):
        c = ControlField(a, controls.dzeta)
        return discrete_cost(spec, simulate_forward(spec, c, noise, x0=x0), c)

    fd = np.empty_like(alpha)
    h = 1e-6
    for idx in np.ndindex(alpha.shape):
        ap, am = alpha.copy(), alpha.copy()
        ap[idx] += h
        am[idx] -= h
        fd[idx] = (cost(ap) - cost(am)) / (2 * h)
    np.testing.assert_allclose(analytic, fd, rtol=1e-6, atol=1e-9)


def test_lq_adjoint_matches_riccati_costate():
    lq = LQSpec(sigma0=0.5, qbar=0.5, abar=0.2)
    law = InitialLaw("normal", (1.0,), (0.5,))
    spec = lq.to_spec(law)
    sol = solve(spec, SolverOptions(steps=50, particles=8000, max_outer=200))
    assert sol.converged
    oracle = riccati_lq(lq, TimeGrid(1.0, 50), law)
    x0 = sol.ensemble.X[0]
    costate = oracle.P[0] * x0 + (oracle.Pi[0] - oracle.P[0]) * x0.mean(axis=0)
    err = np.sqrt(np.mean((sol.adjoint.Y[0] - costate) ** 2)) / np.sqrt(np.mean(costate**2))
    assert err < 0.02
    # Z[k] carries the sensitivity of Y[k+1] = P(t_{k+1}) X[k+1] + ... to the increment;
    # its regression noise decays like 1/sqrt(M)
    ref = 0.5 * oracle.P[1:]
    z_err = np.sqrt(np.mean((sol.adjoint.Z[:, :, 0, 0] - ref[:, None]) ** 2)) / np.sqrt(np.mean(ref**2))
    assert z_err < 0.05
