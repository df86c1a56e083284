"""Hamiltonian calculus on particle slices.

All functions are batched over a leading particle axis: ``x, y`` are
``(M, n)``, ``u`` is ``(M, l)``, ``z`` is ``(M, n, r)`` and ``eta`` is
``(M, d)``. With a control-dependent constraint the minimum condition is
taken on the Lagrangian ``H^{r0} - eta . phi``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem.spec import MuStats, ProblemSpec, fd_step


@dataclass(frozen=True)
class HamiltonianContext:
    spec: ProblemSpec
    r0: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.r0 <= 1.0:
            raise ValueError("r0 must lie in [0, 1]")


def _batch(*arrays):
    single = np.ndim(arrays[0]) == 1
    out = tuple(np.asarray(a, dtype=float)[None] if single else np.asarray(a, dtype=float) for a in arrays)
    return single, out


def _eta(spec: ProblemSpec, eta, m: int) -> np.ndarray:
    if eta is None:
        return np.zeros((m, spec.constraint_count))
    return np.asarray(eta, dtype=float).reshape(m, spec.constraint_count)


def eval_H(ctx: HamiltonianContext, t, x, mu: MuStats, u, y, z):
    """``b . y + tr(sigma z^T) + r0 f``."""
    single, (x, u, y, z) = _batch(x, u, y, z)
    spec = ctx.spec
    z = z.reshape(x.shape[0], spec.state_dim, spec.noise_dim)
    out = (
        np.sum(spec.eval_drift(t, x, mu, u) * y, axis=1)
        + np.sum(spec.eval_diffusion(t, x, mu, u) * z, axis=(1, 2))
        + ctx.r0 * spec.eval_cost(t, x, mu, u)
    )
    return out[0] if single else out


def eval_lagrangian(ctx: HamiltonianContext, t, x, mu, u, y, z, eta=None):
    single, (x, u, y, z) = _batch(x, u, y, z)
    h = eval_H(ctx, t, x, mu, u, y, z)
    if ctx.spec.constraint_count and eta is not None:
        h = h - np.sum(_eta(ctx.spec, eta, x.shape[0]) * ctx.spec.eval_constraints(t, x, mu, u), axis=1)
    return h[0] if single else h


def _grad(ctx, wrt, t, x, mu, u, y, z):
    spec = ctx.spec
    z = z.reshape(x.shape[0], spec.state_dim, spec.noise_dim)
    return (
        np.einsum("mij,mi->mj", spec.partial("drift", wrt, t, x, mu, u), y)
        + np.einsum("mikj,mik->mj", spec.partial("diffusion", wrt, t, x, mu, u), z)
        + ctx.r0 * spec.partial("cost", wrt, t, x, mu, u)
    )


def grad_x_H(ctx: HamiltonianContext, t, x, mu, u, y, z):
    single, (x, u, y, z) = _batch(x, u, y, z)
    out = _grad(ctx, "x", t, x, mu, u, y, z)
    return out[0] if single else out


def grad_u_H(ctx: HamiltonianContext, t, x, mu, u, y, z):
    single, (x, u, y, z) = _batch(x, u, y, z)
    out = _grad(ctx, "u", t, x, mu, u, y, z)
    return out[0] if single else out


def grad_u_lagrangian(ctx: HamiltonianContext, t, x, mu, u, y, z, eta=None):
    """``grad_u H^{r0} - sum_i eta_i grad_u phi^i``."""
    single, (x, u, y, z) = _batch(x, u, y, z)
    g = _grad(ctx, "u", t, x, mu, u, y, z)
    spec = ctx.spec
    if spec.constraint_count and spec.constraint_uses_control and eta is not None:
        g = g - np.einsum("mi,mij->mj", _eta(spec, eta, x.shape[0]), spec.partial("constraint", "u", t, x, mu, u))
    return g[0] if single else g


def grad_x_lagrangian(ctx: HamiltonianContext, t, x, mu, u, y, z, eta=None):
    single, (x, u, y, z) = _batch(x, u, y, z)
    g = _grad(ctx, "x", t, x, mu, u, y, z)
    spec = ctx.spec
    if spec.constraint_count and eta is not None:
        g = g - np.einsum("mi,mij->mj", _eta(spec, eta, x.shape[0]), spec.partial("constraint", "x", t, x, mu, u))
    return g[0] if single else g


def lions_term(ctx: HamiltonianContext, t, x, mu, u, y, z, eta=None, target_x=None, part: str = "both"):
    """Cloud average of the Lions derivative evaluated at ``target_x``.

    ``part`` selects ``"H"`` for ``E'[d_mu H'](target)``, ``"phi"`` for
    ``E'[d_mu phi' . eta'](target)`` or ``"both"`` for their difference, the
    combination entering the adjoint driver. ``target_x`` defaults to the
    cloud itself and may be ``(n,)`` or ``(M', n)``.
    """
    if part not in ("H", "phi", "both"):
        raise ValueError(f"unknown part {part!r}")
    spec = ctx.spec
    single, (x, u, y, z) = _batch(x, u, y, z)
    m = x.shape[0]
    tx = x if target_x is None else np.asarray(target_x, dtype=float)
    tsingle = tx.ndim == 1
    tx = np.atleast_2d(tx)
    if not spec.mean_field:
        out = np.zeros_like(tx)
        return out[0] if tsingle else out
    mean_part = np.zeros(spec.state_dim)
    m2_part = 0.0
    if part in ("H", "both"):
        zz = z.reshape(m, spec.state_dim, spec.noise_dim)
        dmean = (
            np.einsum("mij,mi->mj", spec.partial("drift", "mean", t, x, mu, u), y)
            + np.einsum("mikj,mik->mj", spec.partial("diffusion", "mean", t, x, mu, u), zz)
            + ctx.r0 * spec.partial("cost", "mean", t, x, mu, u)
        )
        dm2 = (
            np.einsum("mi,mi->m", spec.partial("drift", "m2", t, x, mu, u), y)
            + np.einsum("mik,mik->m", spec.partial("diffusion", "m2", t, x, mu, u), zz)
            + ctx.r0 * spec.partial("cost", "m2", t, x, mu, u)
        )
        mean_part = mean_part + dmean.mean(axis=0)
        m2_part += float(dm2.mean())
    if part in ("phi", "both") and spec.constraint_count and eta is not None:
        e = _eta(spec, eta, m)
        sign = -1.0 if part == "both" else 1.0
        mean_part = mean_part + sign * np.einsum("mi,mij->j", e, spec.partial("constraint", "mean", t, x, mu, u)) / m
        m2_part += sign * float(np.einsum("mi,mi->", e, spec.partial("constraint", "m2", t, x, mu, u))) / m
    out = mean_part[None, :] + 2.0 * m2_part * tx
    return out[0] if tsingle else out


def adjoint_driver(ctx: HamiltonianContext, t, x, mu, u, y, z, eta=None):
    """Driver of the adjoint equation at every particle of the slice."""
    return grad_x_lagrangian(ctx, t, x, mu, u, y, z, eta) + lions_term(ctx, t, x, mu, u, y, z, eta)


def natural_residual(spec: ProblemSpec, u, grad, step: float = 1.0) -> np.ndarray:
    """Per-point ``|u - Proj_U(u - step * grad)| / step``."""
    return np.linalg.norm(u - spec.project_control(u - step * grad), axis=-1) / step


def vi_residual(ctx: HamiltonianContext, times, X, mus, alpha, Y, Z, eta=None) -> float:
    """RMS over the grid of the natural residual of the discrete minimum condition.

    Fields are stacked per time step: ``X``, ``alpha``, ``Y`` are ``(N, M, .)``,
    ``Z`` is ``(N, M, n, r)``, ``eta`` is ``(N, M, d)`` or ``None``.
    """
    sq, count = 0.0, 0
    for k in range(len(alpha)):
        e = None if eta is None else eta[k]
        g = grad_u_lagrangian(ctx, times[k], X[k], mus[k], alpha[k], Y[k], Z[k], e)
        r = natural_residual(ctx.spec, alpha[k], g)
        sq += float(np.sum(r * r))
        count += r.size
    return float(np.sqrt(sq / count)) if count else 0.0


def minimize_H_in_u(
    ctx: HamiltonianContext,
    t,
    x,
    mu,
    y,
    z,
    *,
    eta=None,
    u0=None,
    tol: float = 1e-10,
    max_iter: int = 200,
):
    """Pointwise minimiser of the (Lagrangian) Hamiltonian over ``U``.

    Uses the problem's closed-form minimiser when available and applicable; otherwise a
    projected gradient method with Barzilai-Borwein steps and Armijo
    backtracking, warm started at the projection of ``u0``. Returns ``(u, ok)`` where ``ok`` flags per-point
    convergence of the numeric path.
    """
    spec = ctx.spec
    single, (x, y, z) = _batch(x, y, z)
    m = x.shape[0]
    use_eta = eta is not None and spec.constraint_count and spec.constraint_uses_control
    if spec.control_argmin is not None and ctx.r0 > 0 and not use_eta:
        u = spec.project_control(np.asarray(spec.control_argmin(t, x, mu, y, z.reshape(m, spec.state_dim, spec.noise_dim), ctx.r0), dtype=float))
        ok = np.ones(m, dtype=bool)
        return (u[0], ok[0]) if single else (u, ok)
    eta_b = eta if use_eta else None
    if u0 is None:
        u = np.broadcast_to(spec.control_set.origin(), (m, spec.control_dim)).copy()
    else:
        u = spec.project_control(np.asarray(u0, dtype=float).reshape(m, spec.control_dim))

    def objective(v, idx):
        return eval_lagrangian(ctx, t, x[idx], mu, v, y[idx], z[idx], None if eta_b is None else _eta(spec, eta_b, m)[idx])

    def gradient(v, idx):
        return grad_u_lagrangian(ctx, t, x[idx], mu, v, y[idx], z[idx], None if eta_b is None else _eta(spec, eta_b, m)[idx])

    step = np.ones(m)
    ok = np.zeros(m, dtype=bool)
    active = np.arange(m)
    prev_u, prev_g = None, np.zeros_like(u)
    for _ in range(max_iter):
        g = gradient(u[active], active)
        if prev_u is not None:
            # Barzilai-Borwein trial step, kept only where the curvature estimate is positive
            du, dg = u[active] - prev_u[active], g - prev_g[active]
            sy, ss = np.sum(du * dg, axis=1), np.sum(du * du, axis=1)
            good = (sy > 0) & (ss > 0)
            step[active[good]] = np.clip(ss[good] / sy[good], 1e-12, 1e6)
        else:
            prev_u = u.copy()
        prev_u[active], prev_g[active] = u[active], g
        res = natural_residual(spec, u[active], g)
        done = res <= tol
        ok[active[done]] = True
        active, g, res = active[~done], g[~done], res[~done]
        if active.size == 0:
            break
        f0 = objective(u[active], active)
        s = step[active]
        pending = np.ones(active.size, dtype=bool)
        cand = u[active].copy()
        for _ in range(60):
            idx = np.flatnonzero(pending)
            trial = spec.project_control(u[active[idx]] - s[idx, None] * g[idx])
            d = trial - u[active[idx]]
            f1 = objective(trial, active[idx])
            accept = f1 <= f0[idx] - 1e-4 / s[idx] * np.sum(d * d, axis=1) + 1e-15 * np.abs(f0[idx])
            # below round-off in H the decrease test is blind; fall back on the residual
            flat = ~accept & (f1 <= f0[idx] + 1e-12 * (1.0 + np.abs(f0[idx])))
            if flat.any():
                fi = idx[flat]
                r1 = natural_residual(spec, trial[flat], gradient(trial[flat], active[fi]))
                better = np.zeros_like(accept)
                better[flat] = r1 < res[fi]
                accept |= better
            cand[idx[accept]] = trial[accept]
            pending[idx[accept]] = False
            s[idx[~accept]] *= 0.5
            if not pending.any():
                break
        u[active] = cand
        step[active] = s
    else:
        g = gradient(u[active], active)
        ok[active[natural_residual(spec, u[active], g) <= tol]] = True
    return (u[0], ok[0]) if single else (u, ok)


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1.0))


def check_gradients(ctx: HamiltonianContext, probes: int = 1000, seed: int = 0, scale: float = 1.0) -> dict[str, float]:
    """Worst relative error of ``grad_x H`` and ``grad_u H`` against central differences.

    Probes draw ``(x, mean, u, y, z)`` from ``N(0, scale^2)`` with a second
    moment above ``|mean|^2``; errors are measured per probe.
    """
    spec = ctx.spec
    rng = np.random.default_rng(seed)
    n, l, r = spec.state_dim, spec.control_dim, spec.noise_dim
    worst = {"x": 0.0, "u": 0.0}
    for _ in range(probes):
        x = scale * rng.standard_normal(n)
        u = scale * rng.standard_normal(l)
        y = scale * rng.standard_normal(n)
        z = scale * rng.standard_normal((n, r))
        mean = scale * rng.standard_normal(n)
        mu = MuStats(mean, float(mean @ mean) + scale**2 * rng.random())
        for wrt, arg, analytic in (("x", x, grad_x_H), ("u", u, grad_u_H)):
            a = analytic(ctx, 0.0, x, mu, u, y, z)
            h = fd_step(arg)
            fd = np.empty_like(arg)
            for j in range(arg.size):
                ap, am = arg.copy(), arg.copy()
                ap[j] += h[j]
                am[j] -= h[j]
                if wrt == "x":
                    fp, fm = eval_H(ctx, 0.0, ap, mu, u, y, z), eval_H(ctx, 0.0, am, mu, u, y, z)
                else:
                    fp, fm = eval_H(ctx, 0.0, x, mu, ap, y, z), eval_H(ctx, 0.0, x, mu, am, y, z)
                fd[j] = (fp - fm) / (2 * h[j])
            worst[wrt] = max(worst[wrt], relative_error(a, fd))
    return worst
