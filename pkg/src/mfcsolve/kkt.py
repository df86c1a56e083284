"""Multiplier updates and complementarity residuals.

Shapes: ``eta`` and constraint values ``phi`` are ``(N, M, d)``; singular
increments ``dzeta`` and signals ``s`` are ``(N, M, k)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import AdjointField
from .forward import ParticleEnsemble
from .problem.spec import ProblemSpec


@dataclass
class MultiplierField:
    eta: np.ndarray
    r0: float = 1.0

    def __post_init__(self):
        if np.any(self.eta < 0):
            raise ValueError("multipliers must be nonnegative")
        if not 0.0 <= self.r0 <= 1.0:
            raise ValueError("r0 must lie in [0, 1]")

    def copy(self) -> "MultiplierField":
        return MultiplierField(self.eta.copy(), self.r0)


def _rms(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.sqrt(np.mean(a * a))) if a.size else 0.0


def update_eta(eta, phi, rho: float) -> np.ndarray:
    """``max(0, eta - rho * phi)``."""
    if not rho > 0:
        raise ValueError("rho_eta must be positive")
    return np.maximum(0.0, np.asarray(eta) - rho * np.asarray(phi))


def update_singular(dzeta, s, rho: float) -> np.ndarray:
    """``max(0, dzeta - rho * s)``."""
    if not rho > 0:
        raise ValueError("rho_zeta must be positive")
    dzeta = np.asarray(dzeta)
    if np.any(dzeta < 0):
        raise ValueError("singular increments must be nonnegative")
    return np.maximum(0.0, dzeta - rho * np.asarray(s))


def fischer_burmeister(a, b) -> np.ndarray:
    """``a + b - sqrt(a^2 + b^2)``, zero exactly on complementary pairs."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return a + b - np.hypot(a, b)


def singular_signal(spec: ProblemSpec, ens: ParticleEnsemble, adj: AdjointField, r0: float = 1.0) -> np.ndarray:
    """``s[k] = r0 c(t_k) + G(t_k)^T Y[k+1]``.

    ``dzeta[k]`` is applied at the end of step ``k``, so its marginal effect on
    the cost is carried by the costate of ``X[k+1]``.
    """
    steps = ens.X.shape[0] - 1
    out = np.empty((steps, ens.particles, spec.singular_dim))
    for k in range(steps):
        t = ens.grid.times[k]
        out[k] = r0 * spec.singular_price(t)[None, :] + adj.Y[k + 1] @ spec.gain(t)
    return out


@dataclass(frozen=True)
class ComplementarityResiduals:
    state: float
    singular: float
    dualfeas: float
    primalfeas: float


def complementarity_residuals(phi, eta, s, dzeta, dt: float) -> ComplementarityResiduals:
    """RMS residuals; ``singular`` compares the rate ``dzeta / dt`` with ``s``."""
    return ComplementarityResiduals(
        state=_rms(fischer_burmeister(phi, eta)),
        singular=_rms(np.minimum(np.asarray(dzeta) / dt, s)),
        dualfeas=_rms(np.maximum(0.0, -np.asarray(s))),
        primalfeas=_rms(np.maximum(0.0, -np.asarray(phi))),
    )


def complementarity_gap(phi, eta, dt: float) -> float:
    """Discrete ``int phi eta dt``: ``dt * sum_{k,m,i} phi eta / M``."""
    phi = np.asarray(phi)
    if phi.size == 0:
        return 0.0
    return float(dt * np.sum(phi * eta) / phi.shape[1])


def eta_norm(eta, dt: float = 1.0) -> np.ndarray:
    """Per-constraint ``L^2(dt x dP)`` norm of the multiplier field."""
    eta = np.asarray(eta, dtype=float)
    # scale before squaring so tiny multipliers do not underflow to a zero norm
    scale = np.max(np.abs(eta), axis=(0, 1))
    safe = np.where(scale > 0, scale, 1.0)
    return scale * np.sqrt(dt * np.sum((eta / safe) ** 2, axis=(0, 1)) / eta.shape[1])


def fj_normalize(r0: float, eta, dt: float = 1.0) -> tuple[float, np.ndarray]:
    """Rescale ``(r0, eta)`` so that ``r0 + sum_i ||eta^i|| = 1``."""
    eta = np.asarray(eta, dtype=float)
    total = float(r0) + float(np.sum(eta_norm(eta, dt))) if eta.size else float(r0)
    if not total > 0:
        raise ValueError("cannot normalise all-zero multipliers")
    return float(r0) / total, eta / total
