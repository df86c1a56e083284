"""Registry of built-in coefficient families selectable from a config file.

All families share the linear-quadratic skeleton (``l = r = n``)::

    b(t, x, mu, u)  = b0 + a x + abar mean + bhat u
    sigma(t, x, mu) = diag(sigma0 + sigma1 x)
    f(t, x, mu, u)  = q/2 |x - x_ref|^2 + qbar/2 |mean|^2 + qmx mean.x
                      + rho/2 |u|^2 + kappa/4 sum(u^4)

``*_constrained`` families add ``A x + B mean + C >= 0`` and ``*_singular``
families add a constant singular gain ``G`` priced at ``c``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .controlsets import ControlSet, Reals
from .laws import InitialLaw
from .spec import Derivatives, LinearConstraint, ProblemSpec

LQ_DEFAULTS: dict = {
    "dim": 1,
    "b0": 0.0,
    "a": 0.0,
    "abar": 0.0,
    "bhat": 1.0,
    "sigma0": 0.0,
    "sigma1": 0.0,
    "q": 1.0,
    "qbar": 0.0,
    "qmx": 0.0,
    "rho": 1.0,
    "kappa": 0.0,
    "x_ref": 0.0,
}

CONSTRAINT_KEYS = ("A", "B", "C")
SINGULAR_KEYS = ("G", "c")

# name -> (needs constraint block, needs singular block)
FAMILIES: dict[str, tuple[bool, bool]] = {
    "lq": (False, False),
    "lq_constrained": (True, False),
    "lq_singular": (False, True),
    "lq_constrained_singular": (True, True),
}


def family_keys(name: str) -> set[str]:
    needs_c, needs_s = FAMILIES[name]
    keys = set(LQ_DEFAULTS)
    if needs_c:
        keys.add("constraint")
    if needs_s:
        keys.add("singular")
    return keys


def build_family(
    name: str,
    params: dict | None = None,
    *,
    horizon: float = 1.0,
    control_set: ControlSet | None = None,
    initial_law: InitialLaw | None = None,
    moment_order: float = 4.0,
) -> ProblemSpec:
    if name not in FAMILIES:
        raise KeyError(f"unknown problem family {name!r}; known: {sorted(FAMILIES)}")
    params = dict(params or {})
    unknown = set(params) - family_keys(name)
    if unknown:
        raise KeyError(f"unknown parameters for family {name!r}: {sorted(unknown)}")
    needs_c, needs_s = FAMILIES[name]
    if needs_c and "constraint" not in params:
        raise KeyError(f"family {name!r} requires a 'constraint' block")
    if needs_s and "singular" not in params:
        raise KeyError(f"family {name!r} requires a 'singular' block")

    p = {**LQ_DEFAULTS, **{k: v for k, v in params.items() if k in LQ_DEFAULTS}}
    n = int(p["dim"])
    b0, a, abar, bhat = (float(p[k]) for k in ("b0", "a", "abar", "bhat"))
    s0, s1 = float(p["sigma0"]), float(p["sigma1"])
    q, qbar, qmx, rho, kappa = (float(p[k]) for k in ("q", "qbar", "qmx", "rho", "kappa"))
    x_ref = np.broadcast_to(np.asarray(p["x_ref"], dtype=float), (n,)).copy()
    if rho <= 0:
        raise ValueError("rho must be positive")
    eye = np.eye(n)

    def drift(t, x, mu, u):
        return b0 + a * x + abar * mu.mean[None, :] + bhat * u

    def diffusion(t, x, mu, u):
        return (s0 + s1 * x)[:, :, None] * eye[None, :, :]

    def cost(t, x, mu, u):
        dx = x - x_ref
        return (
            0.5 * q * np.sum(dx * dx, axis=1)
            + 0.5 * qbar * float(mu.mean @ mu.mean)
            + qmx * (x @ mu.mean)
            + 0.5 * rho * np.sum(u * u, axis=1)
            + (0.25 * kappa * np.sum(u**4, axis=1) if kappa else 0.0)
        )

    def const(value, shape):
        arr = np.broadcast_to(value, shape)
        return lambda t, x, mu, u: np.broadcast_to(arr, (x.shape[0],) + shape)

    diff_x = np.zeros((n, n, n))
    for i in range(n):
        diff_x[i, i, i] = s1

    derivs = Derivatives(
        drift_x=const(a * eye, (n, n)),
        drift_u=const(bhat * eye, (n, n)),
        drift_mean=const(abar * eye, (n, n)),
        drift_m2=const(np.zeros(n), (n,)),
        diffusion_x=const(diff_x, (n, n, n)),
        diffusion_u=const(np.zeros((n, n, n)), (n, n, n)),
        diffusion_mean=const(np.zeros((n, n, n)), (n, n, n)),
        diffusion_m2=const(np.zeros((n, n)), (n, n)),
        cost_x=lambda t, x, mu, u: q * (x - x_ref) + qmx * mu.mean[None, :],
        cost_u=lambda t, x, mu, u: rho * u + kappa * u**3 if kappa else rho * u,
        cost_mean=lambda t, x, mu, u: qbar * mu.mean[None, :] + qmx * x,
        cost_m2=lambda t, x, mu, u: np.zeros(x.shape[0]),
    )

    cset = control_set if control_set is not None else Reals(n)
    argmin: Callable | None = None
    if kappa == 0.0:

        def argmin(t, x, mu, y, z, r0):
            if r0 <= 0:
                raise ZeroDivisionError("closed-form minimiser needs r0 > 0")
            return cset.project(-bhat * y / (r0 * rho))

    lin = None
    d = 0
    mean_field = abar != 0 or qbar != 0 or qmx != 0
    if needs_c:
        blk = params["constraint"]
        unknown = set(blk) - set(CONSTRAINT_KEYS)
        if unknown:
            raise KeyError(f"unknown constraint keys {sorted(unknown)}")
        A = np.atleast_2d(np.asarray(blk["A"], dtype=float))
        d = A.shape[0]
        if A.shape[1] != n:
            raise ValueError("constraint A must have shape (d, dim)")
        B = np.broadcast_to(np.asarray(blk.get("B", 0.0), dtype=float), (d, n))
        C = np.broadcast_to(np.asarray(blk.get("C", 0.0), dtype=float), (d,))
        lin = LinearConstraint.constant(A, B, C)
        mean_field = mean_field or bool(np.any(B != 0))

    k = 0
    gain = price = None
    if needs_s:
        blk = params["singular"]
        unknown = set(blk) - set(SINGULAR_KEYS)
        if unknown:
            raise KeyError(f"unknown singular keys {sorted(unknown)}")
        G = np.array(blk["G"], dtype=float)
        G = G.reshape(n, -1) if G.ndim < 2 else G
        k = G.shape[1]
        c = np.broadcast_to(np.asarray(blk["c"], dtype=float), (k,)).copy()
        G.setflags(write=False)
        c.setflags(write=False)
        gain = lambda t: G  # noqa: E731
        price = lambda t: c  # noqa: E731

    law = initial_law if initial_law is not None else InitialLaw("dirac", (0.0,) * n)
    return ProblemSpec(
        horizon=float(horizon),
        state_dim=n,
        control_dim=n,
        noise_dim=n,
        drift=drift,
        diffusion=diffusion,
        running_cost=cost,
        control_set=cset,
        initial_law=law,
        singular_dim=k,
        singular_gain=gain,
        singular_cost=price,
        constraint_count=d,
        linear_constraint=lin,
        mean_field=mean_field,
        noise_free=(s0 == 0.0 and s1 == 0.0),
        derivatives=derivs,
        control_argmin=argmin,
        moment_order=moment_order,
        name=name,
        params={k_: params[k_] for k_ in sorted(params)},
    )
