"""Short column under axial force and bending moment."""
import numpy as np

from ..distributions import GaussianSpec, MixtureSpec
from ..errors import InvalidArgument
from .base import LimitStateModel

# published parameters for (xi_F, xi_M, xi_Y)
SC_MEAN = np.array([500.0, 2000.0, 1.604])
SC_COV = np.array([[10000.0, 20000.0, 0.0],
                   [20000.0, 160000.0, 0.0],
                   [0.0, 0.0, 0.00995]])
SC_MEAN2 = np.array([100.0, 1000.0, 1.0849])
SC_COV2 = np.array([[10000.0, 20000.0, 0.0],
                    [20000.0, 160000.0, 0.0],
                    [0.0, 0.0, 0.0274]])


def short_column_gaussian() -> GaussianSpec:
    return GaussianSpec(SC_MEAN, SC_COV)


def short_column_mixture() -> MixtureSpec:
    return MixtureSpec.from_arrays([0.5, 0.5], [SC_MEAN, SC_MEAN2], [SC_COV, SC_COV2])


class ShortColumnModel(LimitStateModel):
    """F = 4 M / (w h^2 e^Y) + P^2 / (w^2 h^2 e^{2Y}) for u = (w, h), xi = (P, M, Y)."""

    dim_u = 2
    dim_xi = 3
    analytic = True

    def __init__(self, bounds=(5.0, 15.0, 15.0, 25.0)):
        Lw, Uw, Lh, Uh = (float(b) for b in bounds)
        if not (0 < Lw < Uw and 0 < Lh < Uh):
            raise InvalidArgument("bounds must satisfy 0 < L_w < U_w and 0 < L_h < U_h")
        self.bounds = (Lw, Uw, Lh, Uh)

    @property
    def lower(self):
        return np.array([self.bounds[0], self.bounds[2]])

    @property
    def upper(self):
        return np.array([self.bounds[1], self.bounds[3]])

    def _parts(self, u, xi):
        u, xi = self._check_dims(u, xi)
        w, h = u
        if w <= 0 or h <= 0:
            raise InvalidArgument("width and height must be positive")
        P, M, Y = xi
        A = np.exp(-Y) / (w * h * h)
        B = np.exp(-2.0 * Y) / (w * w * h * h)
        return w, h, P, M, A, B

    def eval(self, u, xi):
        w, h, P, M, A, B = self._parts(u, xi)
        return float(4.0 * M * A + P * P * B)

    def eval_batch(self, u, XI):
        w, h = np.asarray(u, dtype=float)
        if w <= 0 or h <= 0:
            raise InvalidArgument("width and height must be positive")
        XI = np.atleast_2d(XI)
        P, M, Y = XI[:, 0], XI[:, 1], XI[:, 2]
        return 4.0 * M * np.exp(-Y) / (w * h * h) + P * P * np.exp(-2.0 * Y) / (w * w * h * h)

    def grad_u_batch(self, u, XI):
        w, h = np.asarray(u, dtype=float)
        XI = np.atleast_2d(XI)
        P, M, Y = XI[:, 0], XI[:, 1], XI[:, 2]
        A = np.exp(-Y) / (w * h * h)
        B = np.exp(-2.0 * Y) / (w * w * h * h)
        return np.column_stack([(-4 * M * A - 2 * P * P * B) / w, (-8 * M * A - 2 * P * P * B) / h])

    def grad_xi(self, u, xi):
        w, h, P, M, A, B = self._parts(u, xi)
        return np.array([2 * P * B, 4 * A, -4 * M * A - 2 * P * P * B])

    def hess_xi(self, u, xi):
        w, h, P, M, A, B = self._parts(u, xi)
        return np.array([[2 * B, 0.0, -4 * P * B],
                         [0.0, 0.0, -4 * A],
                         [-4 * P * B, -4 * A, 4 * M * A + 4 * P * P * B]])

    def grad_u(self, u, xi):
        w, h, P, M, A, B = self._parts(u, xi)
        return np.array([(-4 * M * A - 2 * P * P * B) / w, (-8 * M * A - 2 * P * P * B) / h])

    def mixed(self, u, xi):
        w, h, P, M, A, B = self._parts(u, xi)
        return np.array([[-4 * P * B / w, -4 * A / w, (4 * M * A + 4 * P * P * B) / w],
                         [-4 * P * B / h, -8 * A / h, (8 * M * A + 4 * P * P * B) / h]])
