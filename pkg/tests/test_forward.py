from __future__ import annotations

import numpy as np
import pytest
from conftest import make_spec
from hypothesis import given
from hypothesis import strategies as st

from mfcsolve.forward import (
    BrownianGrid,
    ControlField,
    ForwardBlowUp,
    TimeGrid,
    constraint_occupation,
    dump_trajectories,
    moment_bound_check,
    simulate_forward,
)
from mfcsolve.problem import InitialLaw, LinearConstraint, build_family


def _noise(values, dt):
    dw = np.asarray(values, dtype=float)
    return BrownianGrid(dw, 0, dt)


def _singular_spec(law=None, drift=None):
    return make_spec(
        drift=drift,
        law=law or InitialLaw("normal", (0.5,), (1.0,)),
        singular_dim=1,
        singular_gain=lambda t: np.eye(1),
        singular_cost=lambda t: np.ones(1),
    )


def test_one_euler_step():
    spec = make_spec(
        drift=lambda t, x, mu, u: np.full_like(x, 0.5),
        diffusion=lambda t, x, mu, u: np.ones((x.shape[0], 1, 1)),
        law=InitialLaw("dirac", (1.0,)),
        horizon=0.2,
        singular_dim=1,
        singular_gain=lambda t: np.eye(1),
        singular_cost=lambda t: np.zeros(1),
    )
    controls = ControlField(np.zeros((2, 1, 1)), np.full((2, 1, 1), 0.05))
    ens = simulate_forward(spec, controls, _noise(np.full((2, 1, 1), 0.2), 0.1), x0=np.ones((1, 1)))
    assert ens.X[1, 0, 0] == pytest.approx(1.3, abs=1e-15)


def test_frozen_dynamics_are_constant():
    spec = make_spec(law=InitialLaw("normal", (0.0,), (2.0,)))
    grid = TimeGrid(1.0, 8)
    ens = simulate_forward(spec, ControlField.zeros(spec, 8, 50), BrownianGrid.generate(grid, 50, 1, 3), init_seed=4)
    assert np.array_equal(ens.X, np.broadcast_to(ens.X[0], ens.X.shape))


def test_telescoping_singular_push():
    spec = _singular_spec()
    grid = TimeGrid(1.0, 10)
    controls = ControlField(np.zeros((10, 30, 1)), np.full((10, 30, 1), 0.1))
    ens = simulate_forward(spec, controls, BrownianGrid.generate(grid, 30, 1, 0))
    np.testing.assert_allclose(ens.X[10], ens.X[0] + 1.0, atol=1e-14)


def test_brownian_grid_is_reproducible_and_prefix_stable():
    grid = TimeGrid(1.0, 20)
    a = BrownianGrid.generate(grid, 100, 2, 42)
    b = BrownianGrid.generate(grid, 100, 2, 42)
    c = BrownianGrid.generate(grid, 150, 2, 42)
    assert np.array_equal(a.increments, b.increments)
    assert np.array_equal(a.increments, c.increments[:, :100])
    assert not np.array_equal(a.increments, BrownianGrid.generate(grid, 100, 2, 43).increments)


def test_brownian_increment_statistics():
    grid = TimeGrid(1.0, 50)
    dw = BrownianGrid.generate(grid, 2000, 1, 7).increments
    means = dw.mean(axis=(0, 1)) / np.sqrt(grid.dt)
    assert np.all(np.abs(means) <= 5 / np.sqrt(50 * 2000))
    assert dw.var() == pytest.approx(grid.dt, rel=0.05)


def test_coarsen_sums_paths():
    grid = TimeGrid(1.0, 8)
    fine = BrownianGrid.generate(grid, 5, 1, 1)
    coarse = fine.coarsen(2)
    assert coarse.steps == 4 and coarse.dt == pytest.approx(0.25)
    np.testing.assert_allclose(coarse.increments.sum(axis=0), fine.increments.sum(axis=0), atol=1e-14)
    with pytest.raises(ValueError):
        fine.coarsen(3)


def test_dimension_and_sign_checks():
    spec = make_spec()
    grid = TimeGrid(1.0, 4)
    with pytest.raises(ValueError):
        simulate_forward(spec, ControlField.zeros(spec, 4, 10), BrownianGrid.generate(grid, 9, 1, 0))
    with pytest.raises(ValueError):
        ControlField(np.zeros((4, 10, 1)), -np.ones((4, 10, 1)))


def test_blow_up_reports_step():
    spec = make_spec(drift=lambda t, x, mu, u: 1e200 * (1.0 + x * x), law=InitialLaw("dirac", (1.0,)))
    grid = TimeGrid(1.0, 10)
    with pytest.raises(ForwardBlowUp) as info:
        simulate_forward(spec, ControlField.zeros(spec, 10, 3), BrownianGrid.generate(grid, 3, 1, 0))
    assert 1 <= info.value.step <= 10


def test_workers_do_not_change_results():
    spec = build_family("lq", {"sigma0": 0.5, "qbar": 0.5, "abar": 0.3}, initial_law=InitialLaw("normal", (1.0,), (0.5,)))
    grid = TimeGrid(1.0, 20)
    noise = BrownianGrid.generate(grid, 300, 1, 9)
    controls = ControlField(np.random.default_rng(0).normal(size=(20, 300, 1)), np.zeros((20, 300, 0)))
    a = simulate_forward(spec, controls, noise, 5, workers=1)
    b = simulate_forward(spec, controls, noise, 5, workers=3)
    assert np.array_equal(a.X, b.X)


def test_moment_bound_examples():
    spec = make_spec(law=InitialLaw("dirac", (2.0,)))
    grid = TimeGrid(1.0, 5)
    ens = simulate_forward(spec, ControlField.zeros(spec, 5, 4), BrownianGrid.generate(grid, 4, 1, 0))
    sup, ratio = moment_bound_check(ens, 4.0)
    assert sup == pytest.approx(16.0) and ratio == pytest.approx(16.0 / 17.0)
    zero = make_spec()
    ens = simulate_forward(zero, ControlField.zeros(zero, 5, 4), BrownianGrid.generate(grid, 4, 1, 0))
    assert moment_bound_check(ens, 3.0)[0] == 0.0
    with pytest.raises(ValueError):
        moment_bound_check(ens, 2.0)


def test_moment_ratio_is_stable_under_refinement():
    spec = build_family("lq", {"sigma0": 0.5, "a": -0.5}, initial_law=InitialLaw("normal", (1.0,), (0.5,)))
    ratios = []
    for steps in (100, 200):
        grid = TimeGrid(1.0, steps)
        ens = simulate_forward(spec, ControlField.zeros(spec, steps, 2000), BrownianGrid.generate(grid, 2000, 1, 0))
        ratios.append(moment_bound_check(ens, 4.0)[1])
    assert np.all(np.isfinite(ratios))
    assert abs(ratios[1] / ratios[0] - 1) < 0.2


def _constrained(C):
    return make_spec(constraint_count=1, linear_constraint=LinearConstraint.constant([[0.0]], [[0.0]], [C]))


def test_constraint_occupation_examples():
    grid = TimeGrid(1.0, 4)
    for C, expected in ((1.0, 1.0), (-1.0, 0.0)):
        spec = _constrained(C)
        ens = simulate_forward(spec, ControlField.zeros(spec, 4, 10), BrownianGrid.generate(grid, 10, 1, 0))
        assert constraint_occupation(spec, ens, ControlField.zeros(spec, 4, 10))[0] == expected


def test_constraint_occupation_half_violating():
    # phi = x, half the particles start below zero and stay there
    spec = make_spec(constraint_count=1, linear_constraint=LinearConstraint.constant([[1.0]], [[0.0]], [0.0]))
    steps, m = 10, 40
    x0 = np.where(np.arange(m) % 2 == 0, 1.0, -1.0)[:, None]
    grid = TimeGrid(1.0, steps)
    controls = ControlField.zeros(spec, steps, m)
    ens = simulate_forward(spec, controls, BrownianGrid.generate(grid, m, 1, 0), x0=x0)
    assert abs(constraint_occupation(spec, ens, controls)[0] - 0.5) <= 1 / np.sqrt(steps * m)


@given(st.integers(0, 2**32 - 1))
def test_singular_input_is_linear(seed):
    # G constant, drift state independent, no diffusion
    spec = _singular_spec(drift=lambda t, x, mu, u: u)
    rng = np.random.default_rng(seed)
    steps, m = 6, 5
    grid = TimeGrid(1.0, steps)
    noise = BrownianGrid.generate(grid, m, 1, seed)
    alpha = rng.normal(size=(steps, m, 1))
    d1, d2 = rng.random((steps, m, 1)), rng.random((steps, m, 1))

    def run(dz):
        return simulate_forward(spec, ControlField(alpha, dz), noise, seed).X

    base = run(np.zeros_like(d1))
    np.testing.assert_allclose(run(d1 + d2) - base, (run(d1) - base) + (run(d2) - base), atol=1e-12)


def test_weak_euler_mean_matches_ode():
    # mean dynamics dm = (a + abar) m dt with exact solution m0 exp((a + abar) T)
    a, abar, m = -0.7, 0.4, 4000
    law = InitialLaw("normal", (1.0,), (0.5,))
    errors = {}
    for sigma in (0.0, 0.3):
        spec = build_family("lq", {"a": a, "abar": abar, "sigma0": sigma}, initial_law=law)
        for steps in (20, 40):
            grid = TimeGrid(1.0, steps)
            ens = simulate_forward(spec, ControlField.zeros(spec, steps, m), BrownianGrid.generate(grid, m, 1, 2))
            errors[sigma, steps] = abs(ens.X[-1].mean() / ens.X[0].mean() - np.exp(a + abar))
            assert errors[sigma, steps] <= grid.dt + 4 * sigma / np.sqrt(m)
    # without noise the error is pure time discretisation and halves with dt
    assert errors[0.0, 40] / errors[0.0, 20] == pytest.approx(0.5, abs=0.05)


def test_dump_trajectories(tmp_path):
    spec = make_spec(law=InitialLaw("dirac", (1.5,)))
    grid = TimeGrid(1.0, 2)
    controls = ControlField.zeros(spec, 2, 3)
    ens = simulate_forward(spec, controls, BrownianGrid.generate(grid, 3, 1, 0))
    path = tmp_path / "traj.csv"
    dump_trajectories(path, ens, {"alpha": controls.alpha})
    lines = path.read_text().splitlines()
    assert lines[0] == "k,t,particle,x_0,alpha_0"
    assert len(lines) == 1 + 3 * 3
    assert lines[1] == "0,0.0,0,1.5,0.0"
    assert lines[-1].endswith(",")
