"""Sampled probes of the standing assumptions.

Every probe is evidence, not proof. Growth and Lipschitz conditions are
probed at several magnitudes ``s``: a required constant that keeps growing
with ``s`` (more than ``GROWTH_FACTOR`` between the smallest and largest
scale) is flagged. A flagged probe downgrades the solver guarantee to
"best effort"; validation itself never raises on a failed probe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spec import CoefficientError, MuStats, ProblemSpec

SCALES = (1.0, 10.0, 100.0)
GROWTH_FACTOR = 10.0
CLOUD_SIZE = 8


@dataclass(frozen=True)
class Check:
    status: str  # "pass", "flagged", "n/a" or "unchecked"
    value: float | None = None
    detail: str = ""

    def as_dict(self) -> dict:
        return {"status": self.status, "value": self.value, "detail": self.detail}


@dataclass
class ValidationReport:
    checks: dict[str, Check] = field(default_factory=dict)
    lipschitz: float = 0.0  # worst (A3) quotient
    beta: float = 0.0  # worst monotonicity constant
    system_lipschitz: float = 0.0  # worst (C4) quotient, drives default step sizes

    @property
    def flagged(self) -> list[str]:
        return [k for k, c in self.checks.items() if c.status == "flagged"]

    @property
    def guarantee(self) -> str:
        return "best effort" if self.flagged else "full"

    def as_dict(self) -> dict:
        return {
            "guarantee": self.guarantee,
            "flagged": self.flagged,
            "lipschitz": self.lipschitz,
            "beta": self.beta,
            "system_lipschitz": self.system_lipschitz,
            "checks": {k: c.as_dict() for k, c in self.checks.items()},
        }


def _cloud_stats(rng, n, scale):
    from ..measure import moment_stats

    return moment_stats(scale * rng.standard_normal((CLOUD_SIZE, n)) + scale * rng.standard_normal(n))


def _w2(mu1: MuStats, mu2: MuStats) -> float:
    from ..measure import wasserstein2

    return wasserstein2(mu1.cloud, mu2.cloud).distance


def _control(spec, rng, scale):
    return spec.project_control(scale * rng.standard_normal(spec.control_dim))


def _grows(per_scale: list[float]) -> bool:
    lo, hi = per_scale[0], per_scale[-1]
    return hi > GROWTH_FACTOR * max(lo, 1.0)


def _scale_probe(name, per_scale, what):
    worst = float(max(per_scale))
    if not np.isfinite(worst):
        return Check("flagged", worst, f"{what}: non-finite value on probes")
    if _grows(per_scale):
        return Check("flagged", worst, f"{what} grows with scale: " + ", ".join(f"{v:.3g}" for v in per_scale))
    return Check("pass", worst, f"{what} <= {worst:.3g} on probes")


def _norm(a) -> float:
    return float(np.linalg.norm(np.asarray(a)))


def validate_spec(spec: ProblemSpec, probes: int = 200, seed: int = 0, grid_steps: int = 100) -> ValidationReport:
    """Probe every computable assumption on ``probes`` random points per check."""
    if probes < 100:
        raise ValueError("probe budget must be at least 100")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA55]))
    report = ValidationReport()
    n, r = spec.state_dim, spec.noise_dim
    per = max(1, probes // len(SCALES))
    times = np.linspace(0.0, spec.horizon, grid_steps + 1)
    from .. import hamiltonian as ham  # lazy: hamiltonian imports this package

    ctx = ham.HamiltonianContext(spec, 1.0)

    # (A5) strict positivity and (B6) nonnegativity of the singular price
    if spec.singular_dim:
        cmin = min(float(spec.singular_price(t).min()) for t in times)
        report.checks["B6"] = Check("pass" if cmin >= 0 else "flagged", cmin, "min c(t) on the grid")
        report.checks["A5"] = Check("pass" if cmin > 0 else "flagged", cmin, "c_0 = min c(t) on the grid")
    else:
        report.checks["B6"] = Check("n/a", None, "no singular control")
        report.checks["A5"] = Check("n/a", None, "no singular control")

    report.checks["A2"] = Check("unchecked", None, "uniform upper semicontinuity in the law has no computable probe")

    # (A3) Lipschitz in (x, mu), uniformly in u
    a3 = []
    for s in SCALES:
        worst = 0.0
        for _ in range(per):
            t = rng.uniform(0, spec.horizon)
            x = s * rng.standard_normal(n)
            xp = x + s * 10.0 ** rng.uniform(-3, 0) * rng.standard_normal(n)
            mu, mup = _cloud_stats(rng, n, s), _cloud_stats(rng, n, s)
            u = _control(spec, rng, s)
            num = _norm(spec.eval_drift(t, xp, mup, u) - spec.eval_drift(t, x, mu, u)) + _norm(
                spec.eval_diffusion(t, xp, mup, u) - spec.eval_diffusion(t, x, mu, u)
            )
            den = _norm(x - xp) + _w2(mu, mup)
            worst = max(worst, num / den)
        a3.append(worst)
    report.lipschitz = float(max(a3))
    report.checks["A3"] = _scale_probe("A3", a3, "Lipschitz quotient of (b, sigma)")

    # (A4) linear growth of (b, sigma)
    a4 = []
    for s in SCALES:
        worst = 0.0
        for _ in range(per):
            t = rng.uniform(0, spec.horizon)
            x, mu, u = s * rng.standard_normal(n), _cloud_stats(rng, n, s), _control(spec, rng, s)
            val = _norm(spec.eval_drift(t, x, mu, u)) + _norm(spec.eval_diffusion(t, x, mu, u))
            worst = max(worst, val / (1 + _norm(x) + np.sqrt(mu.m2) + _norm(u)))
        a4.append(worst)
    report.checks["A4"] = _scale_probe("A4", a4, "growth ratio of (b, sigma)")

    # (A6) two-sided envelope of f with exponent p; lower side uses M_1 = 1e-3
    p, m1 = spec.moment_order, 1e-3
    low, high = [], []
    for s in SCALES:
        wl = wh = 0.0
        for _ in range(per):
            t = rng.uniform(0, spec.horizon)
            x, mu, u = s * rng.standard_normal(n), _cloud_stats(rng, n, s), _control(spec, rng, s)
            f = float(spec.eval_cost(t, x, mu, u))
            base = 1 + _norm(x) ** p + np.sqrt(mu.m2)
            wl = max(wl, (m1 * _norm(u) ** p - f) / base)
            wh = max(wh, f / (base + _norm(u) ** p))
        low.append(wl)
        high.append(wh)
    lo_chk = _scale_probe("A6", low, "lower-envelope constant")
    hi_chk = _scale_probe("A6", high, "upper-envelope constant")
    if lo_chk.status == "flagged" or hi_chk.status == "flagged":
        bad = lo_chk if lo_chk.status == "flagged" else hi_chk
        report.checks["A6"] = bad
    else:
        report.checks["A6"] = Check("pass", max(lo_chk.value, hi_chk.value), "two-sided envelope bounded on probes")

    # (B2) bounded constraint gradients
    if spec.constraint_count:
        b2 = []
        for s in SCALES:
            worst = 0.0
            for _ in range(per):
                t = rng.uniform(0, spec.horizon)
                x, mu, u = s * rng.standard_normal(n), _cloud_stats(rng, n, s), _control(spec, rng, s)
                gx = spec.partial("constraint", "x", t, x, mu, u)
                gu = spec.partial("constraint", "u", t, x, mu, u)
                worst = max(worst, float(np.sum(np.linalg.norm(gx, axis=-1) + np.linalg.norm(gu, axis=-1))))
            b2.append(worst)
        report.checks["B2"] = _scale_probe("B2", b2, "sum of constraint gradient norms")
    else:
        report.checks["B2"] = Check("n/a", None, "no constraints")

    # (C1) linear form identity and nondegeneracy
    if not spec.constraint_count:
        report.checks["C1"] = Check("n/a", None, "no constraints")
    elif spec.linear_constraint is None:
        report.checks["C1"] = Check("flagged", None, "constraint not declared in the linear form")
    else:
        lc = spec.linear_constraint
        err = 0.0
        for _ in range(probes):
            t = rng.uniform(0, spec.horizon)
            x, mu, u = rng.standard_normal(n), _cloud_stats(rng, n, 1.0), rng.standard_normal(spec.control_dim)
            direct = lc.A(t) @ x + lc.B(t) @ mu.mean + lc.C(t)
            err = max(err, float(np.max(np.abs(spec.eval_constraints(t, x, mu, u) - direct))))
        a_min = min(float(np.min(np.linalg.norm(lc.A(t), axis=1))) for t in times)
        ab_min = min(float(np.min(np.linalg.norm(lc.A(t) + lc.B(t), axis=1))) for t in times)
        ok = err <= 1e-12 and a_min > 0 and ab_min > 0
        report.checks["C1"] = Check(
            "pass" if ok else "flagged",
            min(a_min, ab_min),
            f"identity error {err:.2e}, min |A| {a_min:.3g}, min |A+B| {ab_min:.3g}",
        )

    # (C2) strict convexity of H in u and existence of the minimiser
    worst_gap = np.inf
    argmin_ok = True
    for _ in range(probes):
        t = rng.uniform(0, spec.horizon)
        x, mu = rng.standard_normal(n), _cloud_stats(rng, n, 1.0)
        y, z = rng.standard_normal(n), rng.standard_normal((n, r))
        u1, u2 = _control(spec, rng, 3.0), _control(spec, rng, 3.0)
        if _norm(u1 - u2) < 1e-8:
            continue
        mid = spec.project_control(0.5 * (u1 + u2))
        gap = 0.5 * (ham.eval_H(ctx, t, x, mu, u1, y, z) + ham.eval_H(ctx, t, x, mu, u2, y, z)) - ham.eval_H(
            ctx, t, x, mu, mid, y, z
        )
        worst_gap = min(worst_gap, gap / _norm(u1 - u2) ** 2)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                _, ok = ham.minimize_H_in_u(ctx, t, x, mu, y, z, tol=1e-8)
        except (CoefficientError, FloatingPointError):
            ok = False
        argmin_ok = argmin_ok and bool(ok)
    c2_ok = worst_gap > 0 and argmin_ok
    report.checks["C2"] = Check(
        "pass" if c2_ok else "flagged",
        float(worst_gap),
        "min midpoint convexity gap / |u1 - u2|^2" + ("" if argmin_ok else "; minimiser did not converge"),
    )

    # (C3) monotonicity and (C4) Lipschitz continuity of (F_hat, b_hat, sigma_hat)
    def hat_fields(t, x, mu, y, z):
        u, _ = ham.minimize_H_in_u(ctx, t, x, mu, y, z, tol=1e-10)
        cloud = mu.cloud
        m = cloud.shape[0]
        lions = ham.lions_term(
            ctx,
            t,
            cloud,
            mu,
            np.broadcast_to(u, (m, spec.control_dim)),
            np.broadcast_to(y, (m, n)),
            np.broadcast_to(z, (m, n, r)),
            target_x=x,
            part="H",
        )
        F = ham.grad_x_H(ctx, t, x, mu, u, y, z) + lions
        return F, spec.eval_drift(t, x, mu, u), spec.eval_diffusion(t, x, mu, u)

    beta = np.inf
    c4 = []
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for s in SCALES:
                worst = 0.0
                for _ in range(per):
                    t = rng.uniform(0, spec.horizon)
                    mu = _cloud_stats(rng, n, s)
                    x1, y1, z1 = s * rng.standard_normal(n), s * rng.standard_normal(n), s * rng.standard_normal((n, r))
                    x2, y2, z2 = s * rng.standard_normal(n), s * rng.standard_normal(n), s * rng.standard_normal((n, r))
                    F1, b1, s1 = hat_fields(t, x1, mu, y1, z1)
                    F2, b2_, s2 = hat_fields(t, x2, mu, y2, z2)
                    dx, dy, dz = x1 - x2, y1 - y2, z1 - z2
                    inner = -float((F1 - F2) @ dx) + float((b1 - b2_) @ dy) + float(np.sum((s1 - s2) * dz))
                    dist2 = float(dx @ dx + dy @ dy + np.sum(dz * dz))
                    beta = min(beta, -inner / dist2)
                    mu2 = _cloud_stats(rng, n, s)
                    F3, b3, s3 = hat_fields(t, x2, mu2, y2, z2)
                    den = _norm(dx) + _norm(dy) + _norm(dz)
                    den_mu = den + _w2(mu, mu2)
                    worst = max(worst, max(_norm(F1 - F2), _norm(b1 - b2_), _norm(s1 - s2)) / den)
                    worst = max(worst, max(_norm(F1 - F3), _norm(b1 - b3), _norm(s1 - s3)) / den_mu)
                c4.append(worst)
    except (CoefficientError, FloatingPointError) as exc:
        detail = f"minimiser diverged: {exc}"
        report.checks["C3"] = report.checks["C4"] = Check("flagged", None, detail)
        return report
    report.beta = float(beta)
    report.system_lipschitz = float(max(c4))
    report.checks["C4"] = _scale_probe("C4", c4, "Lipschitz quotient of (F_hat, b_hat, sigma_hat)")
    c3_ok = beta > report.lipschitz / 2
    report.checks["C3"] = Check(
        "pass" if c3_ok else "flagged",
        float(beta),
        f"beta_hat = {beta:.3g} vs M_hat / 2 = {report.lipschitz / 2:.3g}",
    )
    return report
