"""Steady advection-diffusion on the unit square with Robin boundary control.

    -div(kappa grad y) + w . grad y = f      in (0,1)^2,  w = (1, 0)
    kappa grad y . n = (u - y) / eps0         on the x1 = 0 edge
    kappa grad y . n = 0                      on the rest of the boundary

kappa is 0.8 for x2 >= 0.6 and exp(xi_1) below; f is a Gaussian bump whose
x1-location is xi_2.  The discretisation is cell-centred finite volumes on an
m x m grid: harmonic-mean face conductances, first-order upwind advection and
the Robin flux resolved through a half-cell resistance in series with eps0.
Cell (i, j) has centre ((i + 1/2)/m, (j + 1/2)/m) and unknown index i*m + j;
u_j lives at the centre of the j-th boundary face (x2 = (j + 1/2)/m).
"""
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from ..distributions import GaussianSpec
from ..errors import InvalidArgument, NumericFailure
from .base import LimitStateModel, fd_step


class AdvectionDiffusionModel(LimitStateModel):
    """F(u, xi) = mean temperature over the window [0.4, 0.6]^2."""

    dim_xi = 2
    analytic = False
    mc_budget = 100_000

    def __init__(self, m=15, eps0=1e-4, amplitude=20.0, fd_rel=1e-4, window=(0.4, 0.6)):
        if m < 2:
            raise InvalidArgument("mesh size must be at least 2")
        self.m = int(m)
        self.dim_u = self.m
        self.eps0 = float(eps0)
        self.amplitude = float(amplitude)
        self.fd_rel = float(fd_rel)
        self.h = 1.0 / self.m
        c = (np.arange(self.m) + 0.5) * self.h
        self.x1, self.x2 = np.meshgrid(c, c, indexing="ij")
        self.upper_region = (self.x2 >= 0.6).ravel()

        lo, hi = window
        edges = np.arange(self.m + 1) * self.h
        overlap = np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None)
        wgt = np.outer(overlap, overlap).ravel()
        self.obs = wgt / wgt.sum()
        self._build_pattern()
        self._affine = lru_cache(maxsize=4096)(self._affine_uncached)

    # -- assembly ---------------------------------------------------------
    def _build_pattern(self):
        m = self.m
        idx = np.arange(m * m).reshape(m, m)
        # horizontal faces between (i, j) and (i+1, j); vertical between (i, j) and (i, j+1)
        self._hl, self._hr = idx[:-1, :].ravel(), idx[1:, :].ravel()
        self._vl, self._vr = idx[:, :-1].ravel(), idx[:, 1:].ravel()
        self._west = idx[0, :]

    def kappa_cells(self, xi):
        k = np.full(self.m * self.m, np.exp(xi[0]))
        k[self.upper_region] = 0.8
        return k

    def forcing(self, xi):
        f = self.amplitude * np.exp(-(self.x1 - xi[1]) ** 2 / 0.1) * np.exp(-(self.x2 - 0.5) ** 2 / 0.1)
        return f.ravel() * self.h**2

    def assemble(self, xi):
        """Return (A, B, rhs_f) with A y = B u + rhs_f."""
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (2,):
            raise InvalidArgument("xi must have length 2")
        m, h = self.m, self.h
        N = m * m
        kap = self.kappa_cells(xi)
        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(r)
            cols.append(c)
            vals.append(v)

        # diffusion across interior faces (face length h, centre distance h)
        for L, R in ((self._hl, self._hr), (self._vl, self._vr)):
            kf = 2.0 * kap[L] * kap[R] / (kap[L] + kap[R])
            add(L, L, kf)
            add(R, R, kf)
            add(L, R, -kf)
            add(R, L, -kf)
        # upwind advection, w = (1, 0): outflow through each east face
        add(self._hl, self._hl, np.full(self._hl.size, h))
        add(self._hr, self._hl, np.full(self._hl.size, -h))
        east = np.arange(N).reshape(m, m)[-1, :]
        add(east, east, np.full(m, h))
        # Robin edge: half-cell resistance in series with eps0
        W = self._west
        kw = kap[W]
        G = 1.0 / (h / (2.0 * kw) + self.eps0)
        a_in = (2.0 * kw / h) / (2.0 * kw / h + 1.0 / self.eps0)   # boundary value weight on y_P
        add(W, W, G * h - h * a_in)
        A = sparse.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
        bcoef = G * h + h * (1.0 - a_in)
        B = sparse.csc_matrix((bcoef, (W, np.arange(m))), shape=(N, m))
        return A, B, self.forcing(xi)

    def _factor(self, A):
        try:
            return splu(A)
        except RuntimeError as exc:
            raise NumericFailure("singular advection-diffusion system") from exc

    # -- solves -----------------------------------------------------------
    def solve(self, u, xi):
        """State field y as an (m, m) array indexed [i, j] (x1, x2)."""
        u, xi = self._check_dims(u, xi)
        A, B, f = self.assemble(xi)
        rhs = B @ u + f
        y = self._factor(A).solve(rhs)
        nb = np.linalg.norm(rhs)
        res = np.linalg.norm(A @ y - rhs)
        if nb > 0 and res > 1e-10 * nb:
            raise NumericFailure("linear solve residual too large", residual=res / nb)
        return y.reshape(self.m, self.m)

    def _affine_uncached(self, key):
        xi = np.array(key)
        A, B, f = self.assemble(xi)
        lu = self._factor(A)
        b = float(self.obs @ lu.solve(f))
        a = B.T @ lu.solve(self.obs, trans="T")
        return a, b

    def affine_parts(self, xi):
        """(a, b) with F(u, xi) = a . u + b."""
        return self._affine(tuple(float(v) for v in xi))

    def _stencil(self, xi):
        xi = np.asarray(xi, dtype=float)
        hs = fd_step(xi, self.fd_rel)

        def at(d1, d2):
            return self.affine_parts((xi[0] + d1 * hs[0], xi[1] + d2 * hs[1]))

        return hs, at

    def eval(self, u, xi):
        u, xi = self._check_dims(u, xi)
        a, b = self.affine_parts(xi)
        return float(a @ u + b)

    def eval_batch(self, u, XI):
        u = np.asarray(u, dtype=float)
        out = np.empty(len(XI))
        for k, x in enumerate(np.atleast_2d(XI)):
            A, B, f = self.assemble(x)
            out[k] = self.obs @ self._factor(A).solve(B @ u + f)
        return out

    def grad_u(self, u, xi):
        return self.affine_parts(np.asarray(xi, dtype=float))[0].copy()

    def _d_parts(self, xi):
        hs, at = self._stencil(xi)
        (ap, bp), (am, bm) = at(1, 0), at(-1, 0)
        (cp, dp), (cm, dm) = at(0, 1), at(0, -1)
        da = np.column_stack([(ap - am) / (2 * hs[0]), (cp - cm) / (2 * hs[1])])
        db = np.array([(bp - bm) / (2 * hs[0]), (dp - dm) / (2 * hs[1])])
        return da, db

    def grad_xi(self, u, xi):
        da, db = self._d_parts(xi)
        return da.T @ np.asarray(u, dtype=float) + db

    def mixed(self, u, xi):
        return self._d_parts(xi)[0]

    def hess_xi(self, u, xi):
        u = np.asarray(u, dtype=float)
        hs, at = self._stencil(xi)

        def F(d1, d2):
            a, b = at(d1, d2)
            return a @ u + b

        f0 = F(0, 0)
        H = np.empty((2, 2))
        H[0, 0] = (F(1, 0) - 2 * f0 + F(-1, 0)) / hs[0] ** 2
        H[1, 1] = (F(0, 1) - 2 * f0 + F(0, -1)) / hs[1] ** 2
        H[0, 1] = H[1, 0] = (F(1, 1) - F(1, -1) - F(-1, 1) + F(-1, -1)) / (4 * hs[0] * hs[1])
        return H

    def boundary_energy(self, u):
        """0.5 * integral of u^2 over the control edge."""
        u = np.asarray(u, dtype=float)
        return 0.5 * self.h * float(u @ u)

    def boundary_energy_grad(self, u):
        return self.h * np.asarray(u, dtype=float)


# xi_1 shifts log-conductivity of the lower region, xi_2 the bump location.
PDE_XI_MEAN = np.array([0.0, 0.5])
PDE_XI_COV = np.diag([0.1**2, 0.1**2])


def pde_distribution() -> GaussianSpec:
    return GaussianSpec(PDE_XI_MEAN, PDE_XI_COV)
