"""Problem data of a constrained mean-field control instance.

Coefficients are vectorised over a leading particle axis: ``x`` has shape
``(M, n)``, ``u`` shape ``(M, l)`` and the returned arrays are

=============  ==============
drift          ``(M, n)``
diffusion      ``(M, n, r)``
running_cost   ``(M,)``
constraint     ``(M, d)``
=============  ==============

Mean-field dependence is of moment type: coefficients read the law only
through :class:`MuStats` (mean and second moment), so the Lions derivative
``d_mu g(x')`` collapses to ``d_mean g + 2 x' d_m2 g``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .controlsets import ControlSet
from .laws import InitialLaw

COEFFICIENTS = ("drift", "diffusion", "cost", "constraint")
ARGUMENTS = ("x", "u", "mean", "m2")


class CoefficientError(ValueError):
    """A coefficient produced a non-finite value."""


class MissingDerivativeError(LookupError):
    """A derivative callback is absent and finite differences are disabled."""


@dataclass(frozen=True)
class MuStats:
    """Moment statistics of an (empirical) law."""

    mean: np.ndarray
    m2: float
    cloud: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "m2", float(self.m2))
        sq = float(self.mean @ self.mean)
        if self.m2 < sq - 1e-12 * (1.0 + sq):
            raise ValueError("second moment below the squared mean")

    @property
    def variance(self) -> float:
        return self.m2 - float(self.mean @ self.mean)

    def perturbed(self, mean: np.ndarray | None = None, m2: float | None = None) -> "MuStats":
        # no invariant check: used for difference quotients only
        out = object.__new__(MuStats)
        object.__setattr__(out, "mean", self.mean if mean is None else mean)
        object.__setattr__(out, "m2", self.m2 if m2 is None else float(m2))
        object.__setattr__(out, "cloud", self.cloud)
        return out


def _time_fn(value, shape: tuple[int, ...]):
    if callable(value):
        return value
    arr = np.broadcast_to(np.asarray(value, dtype=float), shape).copy()
    arr.setflags(write=False)
    return lambda t: arr


@dataclass(frozen=True)
class LinearConstraint:
    """Constraints ``A(t) x + B(t) mean + C(t) >= 0`` independent of the control.

    ``A`` and ``B`` evaluate to ``(d, n)`` arrays, ``C`` to ``(d,)``; constants
    are accepted in place of functions of time.
    """

    A: Callable[[float], np.ndarray]
    B: Callable[[float], np.ndarray]
    C: Callable[[float], np.ndarray]

    @classmethod
    def constant(cls, A, B, C) -> "LinearConstraint":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        d, n = A.shape
        return cls(_time_fn(A, (d, n)), _time_fn(B, (d, n)), _time_fn(C, (d,)))


@dataclass(frozen=True)
class Derivatives:
    """Optional analytic partial derivatives.

    Naming is ``<coefficient>_<argument>``. Shapes append the argument axis to
    the coefficient's value shape, e.g. ``drift_x`` is ``(M, n, n)`` with
    ``[m, i, j] = d b_i / d x_j`` and ``cost_m2`` is ``(M,)``.
    """

    drift_x: Callable | None = None
    drift_u: Callable | None = None
    drift_mean: Callable | None = None
    drift_m2: Callable | None = None
    diffusion_x: Callable | None = None
    diffusion_u: Callable | None = None
    diffusion_mean: Callable | None = None
    diffusion_m2: Callable | None = None
    cost_x: Callable | None = None
    cost_u: Callable | None = None
    cost_mean: Callable | None = None
    cost_m2: Callable | None = None
    constraint_x: Callable | None = None
    constraint_u: Callable | None = None
    constraint_mean: Callable | None = None
    constraint_m2: Callable | None = None

    def provided(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name) is not None]


def _zero_constraint(t, x, mu, u):
    return np.zeros((x.shape[0], 0))


@dataclass(frozen=True)
class ProblemSpec:
    """Immutable description of one constrained MFC instance.

    ``control_argmin(t, x, mu, y, z, r0)``, when given, returns the exact
    minimiser of ``H^{r0}`` over the control set; it is only used when the
    constraints do not depend on the control.
    """

    horizon: float
    state_dim: int
    control_dim: int
    noise_dim: int
    drift: Callable
    diffusion: Callable
    running_cost: Callable
    control_set: ControlSet
    initial_law: InitialLaw
    singular_dim: int = 0
    singular_gain: Callable[[float], np.ndarray] | None = None
    singular_cost: Callable[[float], np.ndarray] | None = None
    constraint_count: int = 0
    constraint: Callable | None = None
    linear_constraint: LinearConstraint | None = None
    constraint_uses_control: bool = True
    mean_field: bool = True
    noise_free: bool = False
    derivatives: Derivatives = field(default_factory=Derivatives)
    control_argmin: Callable | None = None
    allow_fd: bool = True
    moment_order: float = 4.0
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        for label in ("state_dim", "control_dim", "noise_dim"):
            if getattr(self, label) < 1:
                raise ValueError(f"{label} must be a positive integer")
        if self.control_set.dim != self.control_dim:
            raise ValueError("control set dimension does not match control_dim")
        if self.initial_law.dim != self.state_dim:
            raise ValueError("initial law dimension does not match state_dim")
        if self.singular_dim and (self.singular_gain is None or self.singular_cost is None):
            raise ValueError("singular controls need both a gain G(t) and a cost c(t)")
        if self.constraint_count and self.constraint is None and self.linear_constraint is None:
            raise ValueError("constraint_count > 0 but no constraint supplied")
        if self.linear_constraint is not None:
            object.__setattr__(self, "constraint_uses_control", False)
        if not self.moment_order > 2:
            raise ValueError("moment order p must exceed 2")

    # ------------------------------------------------------------------ values

    def _check(self, name, out):
        out = np.asarray(out, dtype=float)
        if not np.all(np.isfinite(out)):
            raise CoefficientError(f"coefficient {name!r} returned a non-finite value")
        return out

    def _call(self, name, t, x, mu, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        single = x.ndim == 1
        if single:
            x, u = x[None, :], u[None, :]
        fn = self._function(name)
        out = self._check(name, fn(t, x, mu, u))
        return out[0] if single else out

    def _function(self, name):
        if name == "drift":
            return self.drift
        if name == "diffusion":
            return self.diffusion
        if name == "cost":
            return self.running_cost
        if name == "constraint":
            if self.linear_constraint is not None:
                return self._linear_constraint_values
            return self.constraint if self.constraint is not None else _zero_constraint
        raise KeyError(name)

    def _linear_constraint_values(self, t, x, mu, u):
        lc = self.linear_constraint
        return x @ lc.A(t).T + (lc.B(t) @ mu.mean + lc.C(t))[None, :]

    def eval_drift(self, t, x, mu, u):
        return self._call("drift", t, x, mu, u)

    def eval_diffusion(self, t, x, mu, u):
        return self._call("diffusion", t, x, mu, u)

    def eval_cost(self, t, x, mu, u):
        return self._call("cost", t, x, mu, u)

    def eval_constraints(self, t, x, mu, u):
        """All constraint values, shape ``(M, d)`` (or ``(d,)`` for one point)."""
        return self._call("constraint", t, x, mu, u)

    def eval_constraint(self, i, t, x, mu, u):
        """Value of constraint ``i`` (0-based)."""
        if not 0 <= i < self.constraint_count:
            raise IndexError(f"constraint index {i} outside 0..{self.constraint_count - 1}")
        return self.eval_constraints(t, x, mu, u)[..., i]

    def project_control(self, u):
        return self.control_set.project(u)

    def gain(self, t) -> np.ndarray:
        if not self.singular_dim:
            return np.zeros((self.state_dim, 0))
        G = self._check("singular_gain", self.singular_gain(t))
        return G.reshape(self.state_dim, self.singular_dim)

    def singular_price(self, t) -> np.ndarray:
        if not self.singular_dim:
            return np.zeros(0)
        return self._check("singular_cost", self.singular_cost(t)).reshape(self.singular_dim)

    # ------------------------------------------------------------- derivatives

    def value_shape(self, name) -> tuple[int, ...]:
        return {
            "drift": (self.state_dim,),
            "diffusion": (self.state_dim, self.noise_dim),
            "cost": (),
            "constraint": (self.constraint_count,),
        }[name]

    def partial(self, name, wrt, t, x, mu, u):
        """Partial derivative of a coefficient, batched over particles.

        The derivative axis is appended last (absent for ``m2``). Analytic
        callbacks win; otherwise central differences with step
        ``1e-5 * (1 + |arg|)`` are used unless ``allow_fd`` is off.
        """
        if name not in COEFFICIENTS or wrt not in ARGUMENTS:
            raise KeyError(f"{name}_{wrt}")
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        single = x.ndim == 1
        if single:
            x, u = x[None, :], u[None, :]
        out = self._partial_batched(name, wrt, t, x, mu, u)
        return out[0] if single else out

    def _partial_batched(self, name, wrt, t, x, mu, u):
        m = x.shape[0]
        vshape = self.value_shape(name)
        if name == "constraint" and self.constraint_count == 0:
            tail = () if wrt == "m2" else ({"x": self.state_dim, "u": self.control_dim, "mean": self.state_dim}[wrt],)
            return np.zeros((m, 0) + tail)
        if name == "constraint" and self.linear_constraint is not None:
            lc = self.linear_constraint
            if wrt == "x":
                return np.broadcast_to(lc.A(t), (m,) + vshape + (self.state_dim,)).copy()
            if wrt == "mean":
                return np.broadcast_to(lc.B(t), (m,) + vshape + (self.state_dim,)).copy()
            if wrt == "u":
                return np.zeros((m,) + vshape + (self.control_dim,))
            return np.zeros((m,) + vshape)
        if wrt in ("mean", "m2") and not self.mean_field:
            tail = () if wrt == "m2" else (self.state_dim,)
            return np.zeros((m,) + vshape + tail)
        cb = getattr(self.derivatives, f"{name}_{wrt}")
        if cb is not None:
            out = self._check(f"{name}_{wrt}", cb(t, x, mu, u))
            tail = () if wrt == "m2" else ({"x": self.state_dim, "u": self.control_dim, "mean": self.state_dim}[wrt],)
            return np.broadcast_to(out, (m,) + vshape + tail)
        if not self.allow_fd:
            raise MissingDerivativeError(f"no callback for {name}_{wrt} and finite differences disabled")
        fn = self._function(name)
        return _central_difference(fn, wrt, t, x, mu, u)


def fd_step(arg) -> np.ndarray:
    return 1e-5 * (1.0 + np.abs(arg))


def _central_difference(fn, wrt, t, x, mu, u):
    if wrt == "x":
        h = fd_step(x)
        cols = []
        for j in range(x.shape[1]):
            xp, xm = x.copy(), x.copy()
            xp[:, j] += h[:, j]
            xm[:, j] -= h[:, j]
            diff = (np.asarray(fn(t, xp, mu, u)) - np.asarray(fn(t, xm, mu, u)))
            cols.append(diff / (2 * h[:, j]).reshape((-1,) + (1,) * (diff.ndim - 1)))
        return np.stack(cols, axis=-1)
    if wrt == "u":
        h = fd_step(u)
        cols = []
        for j in range(u.shape[1]):
            up, um = u.copy(), u.copy()
            up[:, j] += h[:, j]
            um[:, j] -= h[:, j]
            diff = (np.asarray(fn(t, x, mu, up)) - np.asarray(fn(t, x, mu, um)))
            cols.append(diff / (2 * h[:, j]).reshape((-1,) + (1,) * (diff.ndim - 1)))
        return np.stack(cols, axis=-1)
    if wrt == "mean":
        h = fd_step(mu.mean)
        cols = []
        for j in range(mu.mean.size):
            mp, mm = mu.mean.copy(), mu.mean.copy()
            mp[j] += h[j]
            mm[j] -= h[j]
            diff = np.asarray(fn(t, x, mu.perturbed(mean=mp), u)) - np.asarray(fn(t, x, mu.perturbed(mean=mm), u))
            cols.append(diff / (2 * h[j]))
        return np.stack(cols, axis=-1)
    h = float(fd_step(mu.m2))
    diff = np.asarray(fn(t, x, mu.perturbed(m2=mu.m2 + h), u)) - np.asarray(fn(t, x, mu.perturbed(m2=mu.m2 - h), u))
    return diff / (2 * h)
