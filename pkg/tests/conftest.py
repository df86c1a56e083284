from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mfcsolve.problem import InitialLaw, ProblemSpec, Reals
from mfcsolve.problem.spec import MuStats

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_spec(*, drift=None, diffusion=None, cost=None, n=1, horizon=1.0, law=None, control_set=None, **kw) -> ProblemSpec:
    """Hand-built spec; missing coefficients are zero."""
    return ProblemSpec(
        horizon=horizon,
        state_dim=n,
        control_dim=n,
        noise_dim=n,
        drift=drift or (lambda t, x, mu, u: np.zeros_like(x)),
        diffusion=diffusion or (lambda t, x, mu, u: np.zeros((x.shape[0], n, n))),
        running_cost=cost or (lambda t, x, mu, u: np.zeros(x.shape[0])),
        control_set=control_set or Reals(n),
        initial_law=law or InitialLaw("dirac", (0.0,) * n),
        **kw,
    )


def mu_of(mean, m2=None) -> MuStats:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    return MuStats(mean, float(mean @ mean) if m2 is None else m2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale runs (minutes)")


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
