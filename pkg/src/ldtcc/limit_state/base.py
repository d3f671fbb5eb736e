"""Limit-state model interface with finite-difference fallbacks."""
from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument

CONCAVITY_FLAGS = ("concave", "convex", "unknown")


def fd_step(x, rel):
    return rel * (1.0 + np.abs(x))


def central_gradient(f, x, rel=1e-6):
    x = np.asarray(x, dtype=float)
    h = fd_step(x, rel)
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h[k]
        g[k] = (f(x + e) - f(x - e)) / (2 * h[k])
    return g


def central_jacobian(f, x, rel=1e-6):
    """Jacobian of a vector-valued f by central differences (rows = outputs)."""
    x = np.asarray(x, dtype=float)
    h = fd_step(x, rel)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h[k]
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h[k]))
    return np.array(cols).T


def central_hessian(f, x, rel=1e-4):
    """Symmetric Hessian of scalar f from a second-difference stencil."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = fd_step(x, rel)
    f0 = f(x)
    H = np.empty((n, n))
    E = np.diag(h)
    for i in range(n):
        H[i, i] = (f(x + E[i]) - 2 * f0 + f(x - E[i])) / h[i] ** 2
        for j in range(i):
            v = (f(x + E[i] + E[j]) - f(x + E[i] - E[j]) - f(x - E[i] + E[j]) + f(x - E[i] - E[j]))
            H[i, j] = H[j, i] = v / (4 * h[i] * h[j])
    return H


class LimitStateModel:
    """F(u, xi) together with its derivatives.

    Subclasses implement ``eval`` and may override any derivative; missing
    ones fall back to central finite differences of ``eval``.  ``analytic``
    states whether the derivatives are exact, which selects the tolerance
    used by ``check_derivatives``.
    """

    dim_u: int
    dim_xi: int
    concavity = "unknown"
    analytic = False

    def eval(self, u, xi) -> float:
        raise NotImplementedError

    def eval_batch(self, u, XI):
        """F at every row of XI."""
        return np.array([self.eval(u, x) for x in np.atleast_2d(XI)])

    def grad_xi(self, u, xi):
        return central_gradient(lambda x: self.eval(u, x), xi)

    def hess_xi(self, u, xi):
        return central_hessian(lambda x: self.eval(u, x), xi)

    def grad_u(self, u, xi):
        return central_gradient(lambda v: self.eval(v, xi), u)

    def mixed(self, u, xi):
        """Matrix of d^2 F / du_i dxi_j, shape (dim_u, dim_xi)."""
        return central_jacobian(lambda v: self.grad_xi(v, xi), u).T

    def grad_u_batch(self, u, XI):
        """Rows are grad_u F(u, xi) for each row xi of XI."""
        return np.array([self.grad_u(u, x) for x in np.atleast_2d(XI)])

    def _check_dims(self, u, xi):
        u = np.asarray(u, dtype=float).reshape(-1)
        xi = np.asarray(xi, dtype=float).reshape(-1)
        if u.shape[0] != self.dim_u:
            raise InvalidArgument(f"u has length {u.shape[0]}, expected {self.dim_u}")
        if xi.shape[0] != self.dim_xi:
            raise InvalidArgument(f"xi has length {xi.shape[0]}, expected {self.dim_xi}")
        return u, xi


class LinearModel(LimitStateModel):
    """F = a.xi + b.u + c."""

    concavity = "concave"
    analytic = True

    def __init__(self, a, b=None, c=0.0):
        self.a = np.asarray(a, dtype=float)
        self.b = np.zeros(1) if b is None else np.asarray(b, dtype=float)
        self.c = float(c)
        self.dim_xi = self.a.size
        self.dim_u = self.b.size

    def eval(self, u, xi):
        u, xi = self._check_dims(u, xi)
        return float(self.a @ xi + self.b @ u + self.c)

    def eval_batch(self, u, XI):
        return np.atleast_2d(XI) @ self.a + float(self.b @ u) + self.c

    def grad_u_batch(self, u, XI):
        return np.tile(self.b, (len(np.atleast_2d(XI)), 1))

    def grad_xi(self, u, xi):
        return self.a.copy()

    def hess_xi(self, u, xi):
        return np.zeros((self.dim_xi, self.dim_xi))

    def grad_u(self, u, xi):
        return self.b.copy()

    def mixed(self, u, xi):
        return np.zeros((self.dim_u, self.dim_xi))


class QuadraticModel(LimitStateModel):
    """F = a.xi + xi.Q.xi / 2 + b.u + c, with u entering linearly."""

    analytic = True

    def __init__(self, a, Q, b=None, c=0.0):
        self.a = np.asarray(a, dtype=float)
        Q = np.asarray(Q, dtype=float)
        self.Q = 0.5 * (Q + Q.T)
        self.b = np.zeros(1) if b is None else np.asarray(b, dtype=float)
        self.c = float(c)
        self.dim_xi = self.a.size
        self.dim_u = self.b.size
        ev = np.linalg.eigvalsh(self.Q)
        if ev.max() <= 0:
            self.concavity = "concave"
        elif ev.min() >= 0:
            self.concavity = "convex"

    def eval(self, u, xi):
        u, xi = self._check_dims(u, xi)
        return float(self.a @ xi + 0.5 * xi @ self.Q @ xi + self.b @ u + self.c)

    def eval_batch(self, u, XI):
        XI = np.atleast_2d(XI)
        return XI @ self.a + 0.5 * np.einsum("ij,jk,ik->i", XI, self.Q, XI) + float(self.b @ u) + self.c

    def grad_xi(self, u, xi):
        return self.a + self.Q @ np.asarray(xi, dtype=float)

    def hess_xi(self, u, xi):
        return self.Q.copy()

    def grad_u(self, u, xi):
        return self.b.copy()

    def mixed(self, u, xi):
        return np.zeros((self.dim_u, self.dim_xi))


class FunctionModel(LimitStateModel):
    """Wrap plain callables; any derivative left as None is finite-differenced."""

    def __init__(self, fun, dim_u, dim_xi, grad_xi=None, hess_xi=None, grad_u=None,
                 mixed=None, concavity="unknown"):
        if concavity not in CONCAVITY_FLAGS:
            raise InvalidArgument(f"unknown concavity flag {concavity!r}")
        self._fun = fun
        self.dim_u, self.dim_xi = int(dim_u), int(dim_xi)
        self.concavity = concavity
        self._derivs = {"grad_xi": grad_xi, "hess_xi": hess_xi, "grad_u": grad_u, "mixed": mixed}
        self.analytic = all(v is not None for v in self._derivs.values())

    def eval(self, u, xi):
        return float(self._fun(np.asarray(u, float), np.asarray(xi, float)))

    def _call(self, name, u, xi):
        fn = self._derivs[name]
        if fn is None:
            return getattr(LimitStateModel, name)(self, u, xi)
        return np.asarray(fn(np.asarray(u, float), np.asarray(xi, float)), dtype=float)

    def grad_xi(self, u, xi):
        return self._call("grad_xi", u, xi)

    def hess_xi(self, u, xi):
        return self._call("hess_xi", u, xi)

    def grad_u(self, u, xi):
        return self._call("grad_u", u, xi)

    def mixed(self, u, xi):
        return self._call("mixed", u, xi)
