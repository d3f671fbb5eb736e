"""Log-normal stock portfolio: F(u, xi) = -sum_i v_i(xi_i) u_i."""
import numpy as np

from ..errors import InvalidArgument
from .base import LimitStateModel


class PortfolioModel(LimitStateModel):
    """Stock values v_i = exp((theta_i - sigma_i^2/2) T + sqrt(T) xi_i).

    F is minus the portfolio value, hence concave in xi for u >= 0.  The
    chance constraint P(F >= -z) <= alpha therefore bounds the probability
    that the total return falls to z or below.
    """

    concavity = "concave"
    analytic = True

    def __init__(self, theta, sigma, T=1.0):
        self.theta = np.asarray(theta, dtype=float).reshape(-1)
        self.sigma = np.asarray(sigma, dtype=float).reshape(-1)
        if self.theta.shape != self.sigma.shape:
            raise InvalidArgument("theta and sigma must have the same length")
        if np.any(self.sigma <= 0):
            raise InvalidArgument("sigma must be componentwise positive")
        if not T > 0:
            raise InvalidArgument("horizon T must be positive")
        self.T = float(T)
        self.dim_u = self.dim_xi = self.theta.size
        self._drift = (self.theta - 0.5 * self.sigma**2) * self.T
        self._sqrtT = np.sqrt(self.T)

    @classmethod
    def from_log_returns(cls, mean, std, T=1.0):
        """Build from the per-step log-return mean (theta - sigma^2/2) and std."""
        std = np.asarray(std, dtype=float)
        return cls(np.asarray(mean, dtype=float) + 0.5 * std**2, std, T)

    def values(self, xi):
        return np.exp(self._drift + self._sqrtT * np.asarray(xi, dtype=float))

    def eval(self, u, xi):
        u, xi = self._check_dims(u, xi)
        return -float(self.values(xi) @ u)

    def eval_batch(self, u, XI):
        return -(self.values(np.atleast_2d(XI)) @ np.asarray(u, dtype=float))

    def total_return(self, u, XI):
        return -self.eval_batch(u, XI)

    def grad_xi(self, u, xi):
        return -self._sqrtT * self.values(xi) * np.asarray(u, dtype=float)

    def hess_xi(self, u, xi):
        return np.diag(-self.T * self.values(xi) * np.asarray(u, dtype=float))

    def grad_u(self, u, xi):
        return -self.values(xi)

    def grad_u_batch(self, u, XI):
        return -self.values(np.atleast_2d(XI))

    def mixed(self, u, xi):
        return np.diag(-self._sqrtT * self.values(xi))
