"""Finite-difference verification of model derivatives."""
from dataclasses import dataclass, field

import numpy as np

from .base import central_gradient, fd_step


EPS = np.finfo(float).eps


def _rel(a, b, noise=0.0, threshold=1.0):
    """Max abs difference over the larger magnitude.

    Differences at the rounding-noise level of the stencil (``noise``) count
    as agreement, which matters when the true derivative is zero.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.max(np.abs(b)), np.max(np.abs(a)), noise / threshold, 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


@dataclass
class DerivativeReport:
    errors: dict = field(default_factory=dict)
    threshold: float = 1e-6
    symmetry: float = 0.0

    @property
    def passed(self) -> bool:
        return all(e <= self.threshold for e in self.errors.values()) and self.symmetry <= 1e-10

    def __str__(self):
        parts = ", ".join(f"{k}={v:.2e}" for k, v in self.errors.items())
        return f"{'pass' if self.passed else 'FAIL'} (threshold {self.threshold:g}): {parts}"


def _fd_cross(f, x, y, rel=1e-4):
    """Matrix of d^2 f / dx_i dy_j from a four-point cross stencil."""
    hx, hy = fd_step(x, rel), fd_step(y, rel)
    out = np.empty((x.size, y.size))
    for i in range(x.size):
        ex = np.zeros_like(x)
        ex[i] = hx[i]
        for j in range(y.size):
            ey = np.zeros_like(y)
            ey[j] = hy[j]
            v = f(x + ex, y + ey) - f(x + ex, y - ey) - f(x - ex, y + ey) + f(x - ex, y - ey)
            out[i, j] = v / (4 * hx[i] * hy[j])
    return out


def check_derivatives(model, u, xi, threshold=None) -> DerivativeReport:
    """Compare every derivative callback against central differences of eval.

    The default threshold is 1e-6 for analytic models and 1e-4 for models
    whose derivatives are themselves finite differences.
    """
    u = np.asarray(u, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if threshold is None:
        threshold = 1e-6 if model.analytic else 1e-4
    rep = DerivativeReport(threshold=threshold)
    F = model.eval
    f0 = 1.0 + abs(F(u, xi))
    hx, hu = fd_step(xi, 1e-4), fd_step(u, 1e-4)
    noise1 = 10 * EPS * f0 / min(fd_step(xi, 1e-6).min(), fd_step(u, 1e-6).min())
    noise_xx = 10 * EPS * f0 / hx.min() ** 2
    noise_ux = 10 * EPS * f0 / (hx.min() * hu.min())
    rep.errors["grad_xi"] = _rel(model.grad_xi(u, xi), central_gradient(lambda x: F(u, x), xi), noise1, threshold)
    rep.errors["grad_u"] = _rel(model.grad_u(u, xi), central_gradient(lambda v: F(v, xi), u), noise1, threshold)
    H = np.asarray(model.hess_xi(u, xi))
    rep.symmetry = float(np.max(np.abs(H - H.T)))
    Hfd = _fd_cross(lambda a, b: F(u, 0.5 * (a + b)), xi, xi)
    # f(a, b) = F((a+b)/2) has cross derivative H/4
    rep.errors["hess_xi"] = _rel(H, 4.0 * Hfd, noise_xx, threshold)
    rep.errors["mixed"] = _rel(model.mixed(u, xi), _fd_cross(lambda v, x: F(v, x), u, xi), noise_ux, threshold)
    return rep
