"""Chance-constrained programs as concrete NlpProblems.

    minimize J(u)  subject to  P(F(u, xi) >= z) <= alpha,  u in U

The LDT builders replace the probability by a first- or second-order
estimate taken at the dominating point, whose optimality conditions are
appended as equality constraints (single-level form).  The sample builders
give the sigmoidal SAA and CVaR baselines.  With ``sense="max_z"`` the
threshold becomes a decision variable: maximize z subject to
P(F(u, xi) >= -z) <= alpha, which for the portfolio model is the
value-at-risk problem.

All LDT builders work in whitened coordinates, xi = c + L zeta with L a
Cholesky factor (of the moment-matched covariance for mixtures), so the
dual variable is stored as kappa = L^T eta.  The probability constraints are
imposed in log space.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy import sparse, special

from . import ldt, nlp
from .distributions import (GaussianSpec, MixtureSpec, as_mixture, cgf_grad, cgf_hess,
                            normal_cdf_inv, normal_logcdf, normal_logpdf)
from .errors import (CurvatureFailure, InfeasibleThreshold, InvalidArgument, LdtError,
                     NumericFailure)
from .limit_state.base import central_gradient

log = logging.getLogger(__name__)

SENSES = ("min", "max_z")
FD_REL = 1e-6


@dataclass
class ChanceSpec:
    """One chance-constrained program.

    ``objective`` is J(u) for ``sense="min"``; with ``sense="max_z"`` it must
    be omitted (the objective is -z) and ``z`` must be None.  ``A_eq``/``b_eq``
    describe linear equalities on u such as the simplex row.
    """

    model: object
    dist: object
    alpha: float
    z: Optional[float] = None
    objective: Optional[Callable] = None
    objective_grad: Optional[Callable] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    sense: str = "min"
    u0: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidArgument("alpha must lie in (0, 1)")
        if self.sense not in SENSES:
            raise InvalidArgument(f"sense must be one of {SENSES}")
        m = self.model.dim_u
        if self.sense == "min":
            if self.z is None or self.objective is None:
                raise InvalidArgument("a minimization needs both z and an objective")
        else:
            if self.z is not None:
                raise InvalidArgument("with sense='max_z' the threshold is a variable; leave z unset")
            if self.objective is not None:
                raise InvalidArgument("with sense='max_z' the objective is fixed to -z")
        self.lower = np.full(m, -np.inf) if self.lower is None else np.asarray(self.lower, float).reshape(-1)
        self.upper = np.full(m, np.inf) if self.upper is None else np.asarray(self.upper, float).reshape(-1)
        if self.lower.shape != (m,) or self.upper.shape != (m,):
            raise InvalidArgument(f"bounds must have length dim_u = {m}")
        if self.A_eq is not None:
            self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
            self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
            if self.A_eq.shape[1] != m or self.b_eq.shape != (self.A_eq.shape[0],):
                raise InvalidArgument("A_eq must be (k, dim_u) with b_eq of length k")
        if self.u0 is not None:
            self.u0 = np.asarray(self.u0, dtype=float).reshape(-1)
            if self.u0.shape != (m,):
                raise InvalidArgument(f"u0 must have length dim_u = {m}")
        if self.objective is not None:
            J = self.objective(self.initial_u())
            if not np.isscalar(J) and np.ndim(J) != 0:
                raise InvalidArgument("objective must return a scalar")

    @property
    def mixture(self) -> MixtureSpec:
        return as_mixture(self.dist)

    def initial_u(self):
        """u0 if given, else the box midpoint, else the uniform simplex point, else zeros."""
        if self.u0 is not None:
            return self.u0.copy()
        m = self.model.dim_u
        lo, hi = self.lower, self.upper
        u = np.zeros(m)
        box = np.isfinite(lo) & np.isfinite(hi)
        u[box] = 0.5 * (lo[box] + hi[box])
        u[~box & np.isfinite(lo)] = np.maximum(lo[~box & np.isfinite(lo)], 0.0)
        if self.A_eq is not None and self.A_eq.shape[0] == 1 and np.allclose(self.A_eq, self.A_eq[0, 0]):
            u = np.full(m, self.b_eq[0] / (self.A_eq[0, 0] * m))
        return np.clip(u, lo, hi)

    def J(self, u):
        return float(self.objective(u))

    def J_grad(self, u):
        if self.objective_grad is not None:
            return np.asarray(self.objective_grad(u), dtype=float)
        return central_gradient(self.objective, u)

    def with_alpha(self, alpha):
        return replace(self, alpha=alpha)


class Layout:
    """Named slices of the stacked decision vector.

    A block may carry an affine map natural = shift + T raw, used to keep
    whitened coordinates inside the solver while exposing xi and eta.
    """

    def __init__(self):
        self._blocks = {}
        self.dim = 0

    def add(self, name, size, shift=None, T=None):
        if name in self._blocks:
            raise InvalidArgument(f"duplicate layout block {name!r}")
        T = None if T is None else np.asarray(T, dtype=float)
        shift = None if shift is None else np.asarray(shift, dtype=float)
        self._blocks[name] = (slice(self.dim, self.dim + size), shift, T)
        self.dim += size
        return self._blocks[name][0]

    def __getitem__(self, name):
        return self._blocks[name][0]

    def __contains__(self, name):
        return name in self._blocks

    @property
    def names(self):
        return list(self._blocks)

    def unpack(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise InvalidArgument(f"vector has length {x.shape}, layout expects {self.dim}")
        out = {}
        for name, (sl, shift, T) in self._blocks.items():
            v = x[sl].copy()
            if T is not None:
                v = T @ v
            if shift is not None:
                v = v + shift
            out[name] = v
        return out

    def pack(self, parts):
        missing = set(self._blocks) - set(parts)
        if missing:
            raise InvalidArgument(f"missing layout blocks: {sorted(missing)}")
        x = np.empty(self.dim)
        for name, (sl, shift, T) in self._blocks.items():
            v = np.asarray(parts[name], dtype=float).reshape(-1)
            if shift is not None:
                v = v - shift
            if T is not None:
                v = np.linalg.solve(T, v)
            x[sl] = v
        return x


@dataclass
class BuiltProblem:
    problem: nlp.NlpProblem
    layout: Layout
    x0: np.ndarray
    spec: ChanceSpec
    method: str
    evaluate: Callable = None          # x -> dict of post-solve diagnostics
    objective_scale: float = 1.0

    def recover(self, x):
        return self.layout.unpack(x)


@dataclass
class CcResult:
    """A solved chance-constrained program in natural units."""

    method: str
    alpha: float
    u: np.ndarray
    z: float
    objective: float
    status: str
    log_probability: float
    parts: dict
    diagnostics: dict
    nlp_result: nlp.NlpResult
    wall_time: float = 0.0

    @property
    def ok(self):
        return self.status == "optimal"

    @property
    def threshold(self):
        """The level in the event F(u, xi) >= threshold."""
        return self.z if self.diagnostics.get("sense", "min") == "min" else -self.z


def solve_built(built: BuiltProblem, options: nlp.SolverOptions | None = None, x0=None,
                eq_mult0=None, ineq_mult0=None) -> CcResult:
    opts = options or nlp.SolverOptions()
    start = built.x0 if x0 is None else np.asarray(x0, dtype=float)
    t0 = time.perf_counter()
    res = nlp.solve(built.problem, start, opts, eq_mult0=eq_mult0, ineq_mult0=ineq_mult0)
    wall = time.perf_counter() - t0
    parts = built.recover(res.x)
    spec = built.spec
    u = parts["u"]
    z = float(parts["z"][0]) if "z" in parts else float(spec.z)
    obj = z if spec.sense == "max_z" else spec.J(u)
    diag = {"sense": spec.sense, "stationarity": res.stationarity, "feasibility": res.feasibility,
            "complementarity": res.complementarity, "iterations": res.iterations,
            "inner_iterations": res.inner_iterations}
    logp = math.nan
    if built.evaluate is not None:
        try:
            extra = built.evaluate(res.x)
            logp = extra.pop("log_probability", math.nan)
            diag.update(extra)
        except (LdtError, ArithmeticError, np.linalg.LinAlgError) as exc:
            diag["evaluate_error"] = str(exc)
    return CcResult(method=built.method, alpha=spec.alpha, u=u, z=z, objective=obj, status=res.status,
                    log_probability=logp, parts=parts, diagnostics=diag, nlp_result=res, wall_time=wall)


# ---------------------------------------------------------------------------
# shared pieces

def _fd_columns(fun, x, cols, rel=FD_REL):
    """Central-difference Jacobian of fun restricted to the listed columns."""
    f0 = np.atleast_1d(fun(x))
    J = np.zeros((f0.size, x.size))
    for k in cols:
        h = rel * (1.0 + abs(x[k]))
        e = np.zeros_like(x)
        e[k] = h
        J[:, k] = (np.atleast_1d(fun(x + e)) - np.atleast_1d(fun(x - e))) / (2 * h)
    return J


def _indices(layout, *names):
    out = []
    for n in names:
        if n in layout:
            sl = layout[n]
            out.extend(range(sl.start, sl.stop))
    return out


def _add_decision_blocks(layout, spec):
    layout.add("u", spec.model.dim_u)
    if spec.sense == "max_z":
        layout.add("z", 1)


def _decision_bounds(layout, spec, lower, upper):
    sl = layout["u"]
    lower[sl], upper[sl] = spec.lower, spec.upper
    if spec.sense == "max_z":
        lower[sl] = np.maximum(lower[sl], 0.0)


class _Decision:
    """Objective, threshold and linear equalities shared by every builder."""

    def __init__(self, spec: ChanceSpec, layout: Layout, scale: float):
        self.spec = spec
        self.layout = layout
        self.scale = scale
        self.su = layout["u"]
        self.sz = layout["z"] if "z" in layout else None

    def threshold(self, x):
        return -x[self.sz][0] if self.sz is not None else float(self.spec.z)

    def objective(self, x):
        if self.sz is not None:
            return -x[self.sz][0] / self.scale
        return self.spec.J(x[self.su]) / self.scale

    def gradient(self, x):
        g = np.zeros_like(x)
        if self.sz is not None:
            g[self.sz] = -1.0 / self.scale
        else:
            g[self.su] = self.spec.J_grad(x[self.su]) / self.scale
        return g

    def linear_block(self):
        spec = self.spec
        if spec.A_eq is None:
            return []
        A, b = spec.A_eq, spec.b_eq
        su, dim = self.su, self.layout.dim

        def fun(x):
            return A @ x[su] - b

        def jac(x):
            J = np.zeros((A.shape[0], dim))
            J[:, su] = A
            return J

        return [nlp.ConstraintBlock(A.shape[0], fun, jac, "linear")]

    def threshold_column(self, J, coef):
        """Add d(-threshold)/dz * coef to the z column (threshold = -z)."""
        if self.sz is not None:
            J[:, self.sz] += np.reshape(coef, (-1, 1))


def _objective_scale(spec, u0):
    if spec.sense == "max_z":
        return 1.0
    return max(1.0, abs(spec.J(u0)))


def _initial_threshold(spec, u0):
    """Starting z for max_z: -F at the beta-sigma point along the whitened gradient.

    For linear F this is the exact quantile; unlike a linearization it stays
    inside the range of F for the log-normal model.
    """
    mm = spec.mixture.moment_matched
    L = mm.factors.L
    d = L.T @ spec.model.grad_xi(u0, mm.mean)
    nd = np.linalg.norm(d)
    beta = max(-normal_cdf_inv(spec.alpha), 0.1)
    if not nd > 0:
        return -spec.model.eval(u0, mm.mean)
    return -spec.model.eval(u0, mm.mean + beta * (L @ d) / nd)


# ---------------------------------------------------------------------------
# LDT builders

class _LdtState:
    """Model quantities at one stacked vector, computed on demand."""

    def __init__(self, b: "_LdtBuilder", x):
        self.b = b
        self.x = x
        lay = b.layout
        self.u = x[lay["u"]]
        self.zeta = x[lay["xi"]]
        self.lam = float(x[lay["lam"]][0])
        self.xi = b.center + b.Lc @ self.zeta
        self.thr = b.dec.threshold(x)

    @cached_property
    def F(self):
        return self.b.model.eval(self.u, self.xi)

    @cached_property
    def g(self):
        return self.b.model.grad_xi(self.u, self.xi)

    @cached_property
    def H(self):
        H = self.b.model.hess_xi(self.u, self.xi)
        return 0.5 * (H + H.T)

    @cached_property
    def Fu(self):
        return self.b.model.grad_u(self.u, self.xi)

    @cached_property
    def Fux(self):
        return self.b.model.mixed(self.u, self.xi)

    @cached_property
    def kappa(self):
        return self.x[self.b.layout["eta"]]

    @cached_property
    def eta(self):
        return self.b.Lc_inv.T @ self.kappa


class _LdtBuilder:
    """Variables (u, [z], zeta, [kappa], lam, [zeta_i, lam_i]) and their constraints."""

    def __init__(self, spec: ChanceSpec, kind: str, order: int, name: str):
        self.spec = spec
        self.model = spec.model
        self.kind = kind
        self.order = order
        self.name = name
        mix = spec.mixture
        self.mix = mix
        if kind == "gaussian":
            if mix.M != 1:
                raise InvalidArgument("the Gaussian builder needs M = 1; use a mixture builder")
            self.gauss = mix.components[0]
        base = mix.components[0] if kind == "gaussian" else mix.moment_matched
        self.center = base.mean
        self.Lc = base.factors.L
        self.Lc_inv = np.linalg.inv(self.Lc)
        self.log_alpha = math.log(spec.alpha)
        n = spec.model.dim_xi

        lay = Layout()
        _add_decision_blocks(lay, spec)
        lay.add("xi", n, shift=self.center, T=self.Lc)
        if kind == "mixture":
            lay.add("eta", n, T=self.Lc_inv.T)
        lay.add("lam", 1)
        self.second_mix = kind == "mixture" and order == 2
        if self.second_mix:
            for i, c in enumerate(mix.components):
                lay.add(f"xt{i}", n, shift=c.mean, T=c.factors.L)
                lay.add(f"lt{i}", 1)
        self.layout = lay
        self.n = n
        self._cache = (None, None)

    # -- state -------------------------------------------------------------
    def state(self, x):
        key = x.tobytes()
        if self._cache[0] != key:
            self._cache = (key, _LdtState(self, x.copy()))
        return self._cache[1]

    def _J(self, rows):
        return np.zeros((rows, self.layout.dim))

    # -- equality blocks ---------------------------------------------------
    def level_block(self):
        lay = self.layout

        def fun(x):
            s = self.state(x)
            return np.array([s.F - s.thr])

        def jac(x):
            s = self.state(x)
            J = self._J(1)
            J[0, lay["u"]] = s.Fu
            J[0, lay["xi"]] = self.Lc.T @ s.g
            self.dec.threshold_column(J, 1.0)
            return J

        return nlp.ConstraintBlock(1, fun, jac, "level")

    def stationarity_gaussian(self):
        lay, L, n = self.layout, self.Lc, self.n

        def fun(x):
            s = self.state(x)
            return s.zeta - s.lam * (L.T @ s.g)

        def jac(x):
            s = self.state(x)
            J = self._J(n)
            J[:, lay["u"]] = -s.lam * (L.T @ s.Fux.T)
            J[:, lay["xi"]] = np.eye(n) - s.lam * (L.T @ s.H @ L)
            J[:, lay["lam"]] = -(L.T @ s.g)[:, None]
            return J

        return nlp.ConstraintBlock(n, fun, jac, "stationarity")

    def dual_eta(self):
        lay, L, n = self.layout, self.Lc, self.n

        def fun(x):
            s = self.state(x)
            return s.kappa - s.lam * (L.T @ s.g)

        def jac(x):
            s = self.state(x)
            J = self._J(n)
            J[:, lay["u"]] = -s.lam * (L.T @ s.Fux.T)
            J[:, lay["xi"]] = -s.lam * (L.T @ s.H @ L)
            J[:, lay["eta"]] = np.eye(n)
            J[:, lay["lam"]] = -(L.T @ s.g)[:, None]
            return J

        return nlp.ConstraintBlock(n, fun, jac, "dual_eta")

    def dual_xi(self):
        lay, n, Li = self.layout, self.n, self.Lc_inv

        def fun(x):
            s = self.state(x)
            return s.zeta - Li @ (cgf_grad(self.mix, s.eta) - self.center)

        def jac(x):
            s = self.state(x)
            J = self._J(n)
            J[:, lay["xi"]] = np.eye(n)
            J[:, lay["eta"]] = -Li @ cgf_hess(self.mix, s.eta) @ Li.T
            return J

        return nlp.ConstraintBlock(n, fun, jac, "dual_xi")

    def _tangent_parts(self, x, i):
        s = self.state(x)
        c = self.mix.components[i]
        zt = x[self.layout[f"xt{i}"]]
        lt = float(x[self.layout[f"lt{i}"]][0])
        xt = c.mean + c.factors.L @ zt
        d = xt - s.xi
        gF2 = s.g + s.H @ d
        return s, c, zt, lt, xt, d, gF2

    def qcqp_blocks(self):
        lay, n = self.layout, self.n
        blocks = []
        for i in range(self.mix.M):
            cols = _indices(lay, "u", "z", "xi", f"xt{i}", f"lt{i}")

            def fun(x, i=i):
                s, c, zt, lt, xt, d, gF2 = self._tangent_parts(x, i)
                F2 = s.F + s.g @ d + 0.5 * d @ s.H @ d
                return np.concatenate([[F2 - s.thr], zt - lt * (c.factors.L.T @ gF2)])

            def jac(x, fun=fun, cols=cols):
                return _fd_columns(fun, x, cols)

            blocks.append(nlp.ConstraintBlock(n + 1, fun, jac, f"qcqp{i}"))
        return blocks

    # -- probability blocks --------------------------------------------------
    def _log_correction(self, S12, H, grad_at, coef):
        """-1/2 log det_perp(I - coef S^1/2 H S^1/2) along S^1/2 grad_at; None if not positive."""
        v = S12 @ grad_at
        nv = np.linalg.norm(v)
        if not nv > 0:
            return None
        M = np.eye(self.n) - coef * (S12 @ H @ S12)
        M = 0.5 * (M + M.T)
        try:
            sign, ldp = ldt.det_perp_parts(M, v / nv)
        except (NumericFailure, ValueError, np.linalg.LinAlgError):
            return None
        if sign <= 0 or not np.isfinite(ldp):
            return None
        return -0.5 * ldp

    def prob_gaussian_first(self):
        lay = self.layout
        q = normal_cdf_inv(self.spec.alpha)

        def fun(x):
            zeta = x[lay["xi"]]
            return np.array([-np.linalg.norm(zeta) - q])

        def jac(x):
            zeta = x[lay["xi"]]
            r = np.linalg.norm(zeta)
            J = self._J(1)
            if r > 0:
                J[0, lay["xi"]] = -zeta / r
            return J

        return nlp.ConstraintBlock(1, fun, jac, "probability")

    def _gauss_corr(self, x):
        s = self.state(x)
        cval = self._log_correction(self.gauss.factors.sqrt, s.H, s.g, s.lam)
        return 50.0 if cval is None else cval

    def gaussian_log_p(self, x):
        r = np.linalg.norm(x[self.layout["xi"]])
        return float(normal_logcdf(-r)) + self._gauss_corr(x)

    def prob_gaussian_second(self):
        lay = self.layout
        cols = _indices(lay, "u", "xi", "lam")

        def fun(x):
            return np.array([self.gaussian_log_p(x) - self.log_alpha])

        def jac(x):
            zeta = x[lay["xi"]]
            r = np.linalg.norm(zeta)
            J = _fd_columns(lambda y: np.array([self._gauss_corr(y)]), x, cols)
            if r > 0:
                mills = math.exp(normal_logpdf(r) - normal_logcdf(-r))
                J[0, lay["xi"]] += -mills * zeta / r
            return J

        return nlp.ConstraintBlock(1, fun, jac, "probability")

    def _mix_first_terms(self, s):
        a = np.empty(self.mix.M)
        sg = np.empty(self.mix.M)
        for i, c in enumerate(self.mix.components):
            Sg = c.cov @ s.g
            sg[i] = math.sqrt(max(float(s.g @ Sg), 1e-300))
            a[i] = float(s.g @ (s.xi - c.mean)) / sg[i]
        return a, sg

    def mixture_first_log_p(self, x):
        s = self.state(x)
        a, _ = self._mix_first_terms(s)
        return float(special.logsumexp(self.mix.log_weights + normal_logcdf(-a)))

    def prob_mixture_first(self):
        lay = self.layout

        def fun(x):
            return np.array([self.mixture_first_log_p(x) - self.log_alpha])

        def jac(x):
            s = self.state(x)
            a, sg = self._mix_first_terms(s)
            lt = self.mix.log_weights + normal_logcdf(-a)
            lp = special.logsumexp(lt)
            pi = np.exp(lt - lp)
            dxi = np.zeros(self.n)
            du = np.zeros(self.model.dim_u)
            for i, c in enumerate(self.mix.components):
                d = s.xi - c.mean
                Sg = c.cov @ s.g
                nn = a[i] * sg[i]
                dadxi = (s.H @ d + s.g) / sg[i] - nn * (s.H @ Sg) / sg[i] ** 3
                dadu = (s.Fux @ d) / sg[i] - nn * (s.Fux @ Sg) / sg[i] ** 3
                w = -pi[i] * math.exp(normal_logpdf(a[i]) - normal_logcdf(-a[i]))
                dxi += w * dadxi
                du += w * dadu
            J = self._J(1)
            J[0, lay["u"]] = du
            J[0, lay["xi"]] = self.Lc.T @ dxi
            return J

        return nlp.ConstraintBlock(1, fun, jac, "probability")

    def mixture_second_terms(self, x):
        """Per-component (log term, log correction) of the second-order mixture estimate."""
        out = []
        for i in range(self.mix.M):
            s, c, zt, lt, xt, d, gF2 = self._tangent_parts(x, i)
            cval = self._log_correction(c.factors.sqrt, s.H, gF2, lt)
            cval = 50.0 if cval is None else cval
            out.append((float(normal_logcdf(-np.linalg.norm(zt))) + cval, cval))
        return out

    def mixture_second_log_p(self, x):
        terms = self.mixture_second_terms(x)
        return float(special.logsumexp(self.mix.log_weights + np.array([t[0] for t in terms])))

    def prob_mixture_second(self):
        lay = self.layout
        names = ["u", "xi"] + [f"xt{i}" for i in range(self.mix.M)] + [f"lt{i}" for i in range(self.mix.M)]
        cols = _indices(lay, *names)

        def fun(x):
            return np.array([self.mixture_second_log_p(x) - self.log_alpha])

        def jac(x):
            return _fd_columns(fun, x, cols)

        return nlp.ConstraintBlock(1, fun, jac, "probability")

    # -- assembly ------------------------------------------------------------
    def initial_parts(self, u0, thr0):
        spec = self.spec
        dist = self.gauss if self.kind == "gaussian" else self.mix
        sol = ldt.solve_ldt_minimizer(dist, self.model, u0, thr0)
        parts = {"u": u0, "xi": sol.xi_star, "lam": [max(sol.lam, 0.0)]}
        if spec.sense == "max_z":
            parts["z"] = [-thr0]
        if self.kind == "mixture":
            parts["eta"] = sol.eta_star
        if self.second_mix:
            g = self.model.grad_xi(u0, sol.xi_star)
            for i, c in enumerate(self.mix.components):
                try:
                    tp = ldt.tangency_second(c, self.model, u0, sol.xi_star, index=i, z=thr0)
                except LdtError:
                    tp = ldt.tangency_first(c, g, sol.xi_star, index=i)
                parts[f"xt{i}"] = tp.xi_tilde
                parts[f"lt{i}"] = [max(tp.lambda_tilde, 0.0)]
        return parts

    def build(self) -> BuiltProblem:
        spec, lay = self.spec, self.layout
        u0 = spec.initial_u()
        thr0 = -_initial_threshold(spec, u0) if spec.sense == "max_z" else float(spec.z)
        scale = _objective_scale(spec, u0)
        self.dec = _Decision(spec, lay, scale)
        parts = self.initial_parts(u0, thr0)
        x0 = lay.pack(parts)

        lower = np.full(lay.dim, -np.inf)
        upper = np.full(lay.dim, np.inf)
        _decision_bounds(lay, spec, lower, upper)
        lower[lay["lam"]] = 0.0
        if self.second_mix:
            for i in range(self.mix.M):
                lower[lay[f"lt{i}"]] = 0.0

        eq = [self.level_block()]
        if self.kind == "gaussian":
            eq.append(self.stationarity_gaussian())
            prob = self.prob_gaussian_first() if self.order == 1 else self.prob_gaussian_second()
        else:
            eq += [self.dual_eta(), self.dual_xi()]
            if self.second_mix:
                eq += self.qcqp_blocks()
                prob = self.prob_mixture_second()
            else:
                prob = self.prob_mixture_first()
        eq += self.dec.linear_block()
        problem = nlp.NlpProblem(lay.dim, self.dec.objective, self.dec.gradient, eq=eq, ineq=[prob],
                                 lower=lower, upper=upper)
        return BuiltProblem(problem, lay, np.clip(x0, lower, upper), spec, self.name, self.evaluate, scale)

    def evaluate(self, x):
        out = {}
        if self.kind == "gaussian":
            r = float(np.linalg.norm(x[self.layout["xi"]]))
            if self.order == 1:
                out["log_probability"] = float(normal_logcdf(-r))
            else:
                out["log_probability"] = self.gaussian_log_p(x)
                out["correction"] = math.exp(self._gauss_corr(x))
                s = self.state(x)
                S12 = self.gauss.factors.sqrt
                out["min_eig"] = float(np.linalg.eigvalsh(np.eye(self.n) - s.lam * S12 @ s.H @ S12)[0])
        elif not self.second_mix:
            out["log_probability"] = self.mixture_first_log_p(x)
        else:
            terms = self.mixture_second_terms(x)
            out["log_probability"] = self.mixture_second_log_p(x)
            base = special.logsumexp(self.mix.log_weights + np.array([t[0] - t[1] for t in terms]))
            out["correction"] = float(math.exp(out["log_probability"] - base))
            eigs = []
            s = self.state(x)
            for i, c in enumerate(self.mix.components):
                lt = float(x[self.layout[f"lt{i}"]][0])
                S12 = c.factors.sqrt
                eigs.append(float(np.linalg.eigvalsh(np.eye(self.n) - lt * S12 @ s.H @ S12)[0]))
            out["qcqp3_min_eig"] = eigs
            bad = [i for i, e in enumerate(eigs) if e < -1e-6]
            if bad:
                out["warnings"] = [f"component {i}: tangency point fails the global second-order check" for i in bad]
                log.warning("second-order mixture solution: qcqp3 check fails for components %s", bad)
        return out


def build_gaussian_cc(spec: ChanceSpec, order: int = 1) -> BuiltProblem:
    """Single-level LDT program for a single Gaussian, first- or second-order estimate."""
    if order not in (1, 2):
        raise InvalidArgument("order must be 1 or 2")
    return _LdtBuilder(spec, "gaussian", order, f"ldt{order}").build()


def build_mixture_cc_first(spec: ChanceSpec) -> BuiltProblem:
    return _LdtBuilder(spec, "mixture", 1, "ldt1").build()


def build_mixture_cc_second(spec: ChanceSpec) -> BuiltProblem:
    return _LdtBuilder(spec, "mixture", 2, "ldt2").build()


def build_ldt(spec: ChanceSpec, order: int = 1) -> BuiltProblem:
    """Gaussian builder for M = 1, mixture builder otherwise."""
    if spec.mixture.M == 1:
        return build_gaussian_cc(spec, order)
    return build_mixture_cc_first(spec) if order == 1 else build_mixture_cc_second(spec)


# ---------------------------------------------------------------------------
# sample baselines

def _psi(s, nu):
    """2 (nu + 1) / (nu + exp(-s)) - 1 and its derivative, overflow-free."""
    s = np.asarray(s, dtype=float)
    e = np.exp(-np.abs(s))
    pos = s >= 0
    val = np.where(pos, 2 * (nu + 1) / (nu + e), 2 * (nu + 1) * e / (nu * e + 1)) - 1.0
    der = np.where(pos, 2 * (nu + 1) * e / (nu + e) ** 2, 2 * (nu + 1) * e / (nu * e + 1) ** 2)
    return val, der


def _sample_jac(N, dim, su, G, extra, sp):
    """Sparse rows [G | extra columns | -I on p] for the per-sample constraints."""
    m = su.stop - su.start
    r = [np.repeat(np.arange(N), m)]
    c = [np.tile(np.arange(su.start, su.stop), N)]
    v = [np.asarray(G, dtype=float).ravel()]
    for col, vals in extra:
        r.append(np.arange(N))
        c.append(np.full(N, col))
        v.append(vals)
    r.append(np.arange(N))
    c.append(np.arange(sp.start, sp.stop))
    v.append(-np.ones(N))
    return sparse.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(N, dim))


class _SampleBuilder:
    def __init__(self, spec: ChanceSpec, samples, name):
        self.spec = spec
        self.model = spec.model
        self.X = np.atleast_2d(np.asarray(samples, dtype=float))
        if self.X.shape[0] < 1 or self.X.shape[1] != spec.model.dim_xi:
            raise InvalidArgument(f"samples must be (N, {spec.model.dim_xi}) with N >= 1")
        self.N = self.X.shape[0]
        self.name = name
        lay = Layout()
        _add_decision_blocks(lay, spec)
        self.layout = lay
        self._cache = (None, None)

    def values(self, x):
        """F(u, xi^i) for all samples, one evaluation per sample, cached per x."""
        key = x.tobytes()
        if self._cache[0] != key:
            self._cache = (key, self.model.eval_batch(x[self.layout["u"]], self.X))
        return self._cache[1]

    def start(self):
        spec = self.spec
        u0 = spec.initial_u()
        scale = _objective_scale(spec, u0)
        self.dec = _Decision(spec, self.layout, scale)
        parts = {"u": u0, "p": np.zeros(self.N)}
        if spec.sense == "max_z":
            vals = self.model.eval_batch(u0, self.X)
            # start at the empirical quantile so the sample constraint is nearly tight
            parts["z"] = [-float(np.quantile(vals, 1 - spec.alpha, method="inverted_cdf"))]
        return u0, parts, scale

    def bounds(self):
        lay = self.layout
        lower = np.full(lay.dim, -np.inf)
        upper = np.full(lay.dim, np.inf)
        _decision_bounds(lay, self.spec, lower, upper)
        lower[lay["p"]] = 0.0
        return lower, upper

    def hits(self, x):
        return self.values(x) >= self.dec.threshold(x)

    def evaluate(self, x):
        frac = float(np.mean(self.hits(x)))
        return {"log_probability": math.log(frac) if frac > 0 else -math.inf, "sample_fraction": frac,
                "N": self.N}


def build_saa(spec: ChanceSpec, samples, nu: float = 200.0, tau: float = 200.0) -> BuiltProblem:
    """Sigmoidal sample-average program in (u, p)."""
    if not (nu > 0 and tau > 0):
        raise InvalidArgument("nu and tau must be positive")
    b = _SampleBuilder(spec, samples, "saa")
    lay = b.layout
    lay.add("p", b.N)
    u0, parts, scale = b.start()
    dec = b.dec
    N, su, sp = b.N, lay["u"], lay["p"]
    alpha = spec.alpha

    def sig_fun(x):
        val, _ = _psi(tau * (b.values(x) - dec.threshold(x)), nu)
        return val - x[sp]

    def sig_jac(x):
        _, der = _psi(tau * (b.values(x) - dec.threshold(x)), nu)
        G = b.model.grad_u_batch(x[su], b.X) * (tau * der)[:, None]
        extra = [(dec.sz.start, tau * der)] if dec.sz is not None else []
        return _sample_jac(N, lay.dim, su, G, extra, sp)

    def mean_fun(x):
        return np.array([np.mean(x[sp]) - alpha])

    def mean_jac(x):
        J = np.zeros((1, lay.dim))
        J[0, sp] = 1.0 / N
        return J

    parts["p"] = np.maximum(_psi(tau * (b.model.eval_batch(u0, b.X) - (-parts["z"][0] if "z" in parts else spec.z)),
                                 nu)[0], 0.0)
    lower, upper = b.bounds()
    ineq = [nlp.ConstraintBlock(N, sig_fun, sig_jac, "sigmoid"), nlp.ConstraintBlock(1, mean_fun, mean_jac, "mean")]
    problem = nlp.NlpProblem(lay.dim, dec.objective, dec.gradient, eq=dec.linear_block(), ineq=ineq,
                             lower=lower, upper=upper)
    x0 = np.clip(lay.pack(parts), lower, upper)
    return BuiltProblem(problem, lay, x0, spec, "saa", b.evaluate, scale)


def build_cvar(spec: ChanceSpec, samples) -> BuiltProblem:
    """CVaR outer approximation in (u, p, t)."""
    b = _SampleBuilder(spec, samples, "cvar")
    lay = b.layout
    lay.add("p", b.N)
    lay.add("t", 1)
    u0, parts, scale = b.start()
    dec = b.dec
    N, su, sp, st = b.N, lay["u"], lay["p"], lay["t"]
    alpha = spec.alpha

    def row_fun(x):
        return b.values(x) - dec.threshold(x) + x[st][0] - x[sp]

    def row_jac(x):
        G = b.model.grad_u_batch(x[su], b.X)
        extra = [(st.start, np.ones(N))]
        if dec.sz is not None:
            extra.append((dec.sz.start, np.ones(N)))
        return _sample_jac(N, lay.dim, su, G, extra, sp)

    def mean_fun(x):
        return np.array([np.mean(x[sp]) - alpha * x[st][0]])

    def mean_jac(x):
        J = np.zeros((1, lay.dim))
        J[0, sp] = 1.0 / N
        J[0, st] = -alpha
        return J

    thr0 = -parts["z"][0] if "z" in parts else spec.z
    vals = b.model.eval_batch(u0, b.X)
    t0 = max(float(np.max(thr0 - vals)) if N else 1.0, 1e-3)
    parts["t"] = [t0]
    parts["p"] = np.maximum(vals - thr0 + t0, 0.0)
    lower, upper = b.bounds()
    ineq = [nlp.ConstraintBlock(N, row_fun, row_jac, "cvar_rows"), nlp.ConstraintBlock(1, mean_fun, mean_jac, "mean")]
    problem = nlp.NlpProblem(lay.dim, dec.objective, dec.gradient, eq=dec.linear_block(), ineq=ineq,
                             lower=lower, upper=upper)
    x0 = np.clip(lay.pack(parts), lower, upper)
    return BuiltProblem(problem, lay, x0, spec, "cvar", b.evaluate, scale)


# ---------------------------------------------------------------------------
# VaR maximization and the alpha sweep

METHODS = ("ldt1", "ldt2", "saa", "cvar")


def make_builder(method: str, samples=None, nu: float = 200.0, tau: float = 200.0):
    """A callable spec -> BuiltProblem for a method name."""
    if method == "ldt1":
        return lambda spec: build_ldt(spec, 1)
    if method == "ldt2":
        return lambda spec: build_ldt(spec, 2)
    if method in ("saa", "cvar"):
        if samples is None:
            raise InvalidArgument(f"method {method!r} needs samples")
        if method == "saa":
            return lambda spec: build_saa(spec, samples, nu, tau)
        return lambda spec: build_cvar(spec, samples)
    raise InvalidArgument(f"unknown method {method!r}; expected one of {METHODS}")


def var_spec(model, dist, alpha, name="var") -> ChanceSpec:
    """Maximize z over the simplex subject to P(return <= z) <= alpha."""
    m = model.dim_u
    return ChanceSpec(model=model, dist=dist, alpha=alpha, sense="max_z", lower=np.zeros(m),
                      upper=np.full(m, np.inf), A_eq=np.ones((1, m)), b_eq=np.ones(1), name=name)


def build_var_max(spec: ChanceSpec, method: str = "ldt1", samples=None, nu: float = 200.0,
                  tau: float = 200.0) -> BuiltProblem:
    """VaR maximization: z becomes a variable and the event is F(u, xi) >= -z."""
    if spec.sense != "max_z":
        spec = var_spec(spec.model, spec.dist, spec.alpha, spec.name)
    if spec.A_eq is None:
        m = spec.model.dim_u
        spec = replace(spec, A_eq=np.ones((1, m)), b_eq=np.ones(1))
    return make_builder(method, samples, nu, tau)(spec)


@dataclass
class SweepStep:
    alpha: float
    result: Optional[CcResult]
    status: str
    warm: bool
    mc: object = None
    check: str = ""
    log_gap: float = math.nan
    error: str = ""
    wall_time: float = 0.0


def sweep_seed(seed, k):
    """Seed of the k-th feasibility check, derived from the top-level seed."""
    return int(np.random.SeedSequence(seed, spawn_key=(1, k)).generate_state(1)[0])


def mc_check_size(alpha, cap=10_000_000):
    return int(min(math.ceil(10.0 / alpha), cap))


def check_feasibility(spec, res: CcResult, seed, cap=10_000_000, min_alpha=1e-5, max_evaluations=None, N=None):
    """MC check for alpha >= min_alpha, otherwise an order-1 LDT estimate at the solution.

    The default sample size 10/alpha keeps the binomial standard error at
    level alpha below alpha/3.  Returns (estimate, kind, log10 gap to alpha).
    """
    from .mc import mc_probability
    thr = res.threshold
    if res.alpha >= min_alpha:
        N = mc_check_size(res.alpha, cap) if N is None else int(N)
        budget = max_evaluations if max_evaluations is not None else getattr(spec.model, "mc_budget", None)
        if budget is not None:
            N = min(N, int(budget))
        est = mc_probability(spec.dist, spec.model, res.u, thr, N, seed, max_evaluations=budget)
        gap = math.log10(est.p_hat) - math.log10(res.alpha) if est.hit_count else -math.inf
        return est, "mc", gap
    est, _ = ldt.estimate(spec.dist if spec.mixture.M > 1 else spec.mixture.components[0],
                          spec.model, res.u, thr, 1)
    return est, "ldt", (est.log_value - math.log(res.alpha)) / math.log(10)


def alpha_sweep(spec: ChanceSpec, alphas, builder="ldt1", options: nlp.SolverOptions | None = None,
                warm: bool = True, check: bool = True, seed: int = 0, mc_cap: int = 10_000_000,
                samples=None, nu=200.0, tau=200.0, fail_at=None, check_N=None) -> list:
    """Solve the chance-constrained problem at each alpha in decreasing order, warm-starting from the last optimum.

    ``builder`` is a method name or a callable spec -> BuiltProblem.  A failed
    step is recorded and the next step starts cold.  ``fail_at`` (a step
    index) injects a failure, for exercising that path.
    """
    alphas = [float(a) for a in alphas]
    if not alphas or any(not 0 < a < 1 for a in alphas):
        raise InvalidArgument("alphas must lie in (0, 1)")
    if any(b >= a for a, b in zip(alphas, alphas[1:])):
        raise InvalidArgument("alphas must be strictly decreasing")
    build = make_builder(builder, samples, nu, tau) if isinstance(builder, str) else builder
    steps = []
    prev = None
    for k, a in enumerate(alphas):
        t0 = time.perf_counter()
        sk = spec.with_alpha(a)
        try:
            if fail_at is not None and k == fail_at:
                raise NumericFailure("injected failure")
            built = build(sk)
            use_warm = warm and prev is not None and prev.x.shape == built.x0.shape
            if use_warm:
                res = solve_built(built, options, x0=prev.x, eq_mult0=prev.eq_multipliers,
                                  ineq_mult0=prev.ineq_multipliers)
            else:
                res = solve_built(built, options)
        except (LdtError, ArithmeticError, np.linalg.LinAlgError, InvalidArgument) as exc:
            log.warning("sweep step alpha=%g failed: %s", a, exc)
            steps.append(SweepStep(a, None, "failed", False, error=str(exc),
                                   wall_time=time.perf_counter() - t0))
            prev = None
            continue
        step = SweepStep(a, res, res.status, use_warm, wall_time=time.perf_counter() - t0)
        if check and res.ok:
            try:
                step.mc, step.check, step.log_gap = check_feasibility(sk, res, sweep_seed(seed, k), mc_cap,
                                                                      N=check_N)
            except (LdtError, InvalidArgument) as exc:
                step.error = f"feasibility check failed: {exc}"
        steps.append(step)
        prev = res.nlp_result if res.ok else None
    return steps
