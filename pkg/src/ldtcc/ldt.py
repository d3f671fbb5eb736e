"""Dominating points and first/second-order LDT probability estimates.

For a Gaussian, the dominating point minimizes 0.5*||xi - mu||^2 in the
cov^{-1} norm over the level set F(u, xi) = z.  For a mixture it is found
through the dual pair (xi, eta) with xi = grad S(eta).  The estimates are
Gaussian integrals over the half-space (order 1) or the osculating quadric
(order 2) at that point.  Everything is evaluated in log space and only
exponentiated when a ``ProbEstimate`` is built.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg, optimize, special

from . import nlp
from .distributions import (GaussianSpec, MixtureSpec, as_mixture, cgf, cgf_grad, cgf_hess,
                            normal_logcdf, rate_mixture)
from .errors import CurvatureFailure, InfeasibleThreshold, InvalidArgument, NumericFailure


@dataclass
class LdtOptions:
    solver: nlp.SolverOptions = field(default_factory=lambda: nlp.SolverOptions(max_outer=60))
    n_perturb: int = 5
    perturb_scale: float = 0.5
    seed: int = 20230517
    polish: bool = True
    max_radius: float = 64.0


@dataclass
class LdtSolution:
    xi_star: np.ndarray
    eta_star: np.ndarray
    lam: float
    rate_value: float
    kkt_residual: float
    constraint_gap: float
    grad: np.ndarray = None
    kind: str = "gaussian"
    starts: int = 1
    status: str = "optimal"

    @property
    def lambda_(self):
        return self.lam


@dataclass
class ComponentTerm:
    weight: float
    log_value: float
    correction: float = 1.0
    min_eig: float = np.nan
    tangency: Optional["TangencyPoint"] = None


@dataclass
class ProbEstimate:
    log_value: float
    order: int
    correction: float = 1.0
    curvature_ok: bool = True
    components: list = field(default_factory=list)

    @property
    def value(self) -> float:
        return float(np.exp(self.log_value))


@dataclass
class TangencyPoint:
    xi_tilde: np.ndarray
    lambda_tilde: float
    index: int = 0
    min_eig: float = np.nan
    residual: float = 0.0

    @property
    def qcqp3_ok(self):
        return not (self.min_eig < -1e-6)


# ---------------------------------------------------------------------------
# helpers

def _newton(fun, y, tol, max_iter=40):
    """Damped Newton on a square system; returns the best iterate found."""
    r, J = fun(y)
    rn = np.linalg.norm(r)
    for _ in range(max_iter):
        if rn <= tol:
            break
        try:
            d = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(d)):
            break
        t = 1.0
        while t > 1e-6:
            yt = y + t * d
            try:
                rt, Jt = fun(yt)
            except (ArithmeticError, ValueError, np.linalg.LinAlgError, RuntimeError):
                rt = None
            if rt is not None and np.all(np.isfinite(rt)) and np.linalg.norm(rt) < rn:
                break
            t *= 0.5
        else:
            break
        y, r, J, rn = yt, rt, Jt, np.linalg.norm(rt)
    return y, rn


def _level_crossing(phi, max_radius=64.0, tol=1e-14):
    """A root of phi on (0, max_radius], given phi(0) < 0; None if no sign change is seen."""
    hi, prev = 1.0, 0.0
    while hi <= max_radius and phi(hi) < 0:
        prev, hi = hi, 2 * hi
    if hi > max_radius:
        return None
    return optimize.brentq(phi, prev, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=200)


# ---------------------------------------------------------------------------
# dominating point

def _gaussian_start(g: GaussianSpec, model, u, z, radius, seed):
    L = g.factors.L
    mu = g.mean

    def along(d):
        d = d / np.linalg.norm(d)
        r = _level_crossing(lambda s: model.eval(u, mu + L @ (s * d)) - z, radius)
        return None if r is None else r * d

    g0 = model.grad_xi(u, mu)
    b = L.T @ g0
    if np.linalg.norm(b) > 0:
        zeta = along(b)
        if zeta is not None:
            return zeta
    # fall back to rays through random directions, keeping the nearest crossing
    rng = np.random.default_rng(seed)
    best = None
    for d in rng.standard_normal((256, g.dim)):
        zeta = along(d)
        if zeta is not None and (best is None or zeta @ zeta < best @ best):
            best = zeta
    if best is None:
        raise InfeasibleThreshold(f"no point with F >= {z} found along search rays")
    return best


def _gaussian_local(g, model, u, z, zeta0, opts):
    L, mu = g.factors.L, g.mean

    def xi_of(zeta):
        return mu + L @ zeta

    prob = nlp.NlpProblem(
        dim=g.dim,
        objective=lambda v: 0.5 * v @ v,
        gradient=lambda v: v.copy(),
        eq=[nlp.ConstraintBlock(1, lambda v: np.array([model.eval(u, xi_of(v)) - z]),
                                lambda v: (L.T @ model.grad_xi(u, xi_of(v)))[None, :], "level")],
    )
    res = nlp.solve(prob, zeta0, opts.solver)
    if res.status == "numeric-failure":
        return None
    zeta = res.x
    lam = -float(res.eq_multipliers[0]) if res.eq_multipliers.size else 0.0

    if opts.polish:
        def system(y):
            zt, lm = y[:-1], y[-1]
            xi = xi_of(zt)
            b = L.T @ model.grad_xi(u, xi)
            A = L.T @ model.hess_xi(u, xi) @ L
            r = np.concatenate([zt - lm * b, [model.eval(u, xi) - z]])
            J = np.block([[np.eye(g.dim) - lm * A, -b[:, None]], [b[None, :], np.zeros((1, 1))]])
            return r, J

        y, _ = _newton(system, np.concatenate([zeta, [lam]]), 1e-14 * (1 + abs(z) + np.linalg.norm(zeta)))
        zeta, lam = y[:-1], float(y[-1])
    return zeta, lam, res


def _finish_gaussian(g, model, u, z, zeta, lam, starts, status):
    xi = g.mean + g.factors.L @ zeta
    grad = model.grad_xi(u, xi)
    eta = g.factors.solve_LT(zeta)
    kkt = float(np.max(np.abs(eta - lam * grad)))
    gap = model.eval(u, xi) - z
    return LdtSolution(xi_star=xi, eta_star=eta, lam=lam, rate_value=0.5 * float(zeta @ zeta),
                       kkt_residual=kkt, constraint_gap=gap, grad=grad, kind="gaussian",
                       starts=starts, status=status)


def _accept(sol, z):
    return (sol.kkt_residual <= 1e-6 * (1 + np.linalg.norm(sol.grad))
            and abs(sol.constraint_gap) <= 1e-8 * (1 + abs(z)) and sol.lam >= 0)


def _perturbed(zeta0, opts, dim):
    rng = np.random.default_rng(opts.seed)
    scale = opts.perturb_scale * np.linalg.norm(zeta0)
    for _ in range(opts.n_perturb):
        d = rng.standard_normal(dim)
        yield zeta0 + scale * d / np.linalg.norm(d)


def _solve_gaussian(g, model, u, z, opts):
    zeta0 = _gaussian_start(g, model, u, z, opts.max_radius, opts.seed)
    starts = [zeta0]
    if model.concavity == "unknown" and opts.n_perturb > 0:
        starts += list(_perturbed(zeta0, opts, g.dim))
    best, tried = None, []
    for k, s in enumerate(starts):
        out = _gaussian_local(g, model, u, z, s, opts)
        if out is None:
            continue
        zeta, lam, res = out
        sol = _finish_gaussian(g, model, u, z, zeta, lam, len(starts), res.status)
        tried.append(sol)
        if _accept(sol, z) and (best is None or sol.rate_value < best.rate_value):
            best = sol
    if best is None:
        diag = {"candidates": [(s.rate_value, s.kkt_residual, s.constraint_gap) for s in tried]}
        raise NumericFailure("dominating point solve did not converge", diagnostics=diag,
                             residual=min((s.kkt_residual for s in tried), default=np.inf))
    return best


def _solve_mixture(dist: MixtureSpec, model, u, z, opts):
    mm = dist.moment_matched
    L, mbar = mm.factors.L, mm.mean
    n = dist.dim
    gsol = _solve_gaussian(mm, model, u, z, replace(opts, n_perturb=0))
    zeta_g = mm.whiten(gsol.xi_star)
    starts = [zeta_g]
    if model.concavity == "unknown" and opts.n_perturb > 0:
        starts += list(_perturbed(zeta_g, opts, n))

    def unpack(v):
        return mbar + L @ v[:n], mm.factors.solve_LT(v[n:])

    def objective(v):
        xi, eta = unpack(v)
        return float(eta @ xi - cgf(dist, eta))

    def gradient(v):
        xi, eta = unpack(v)
        return np.concatenate([v[n:], mm.factors.solve_L(xi - cgf_grad(dist, eta))])

    def c_level(v):
        return np.array([model.eval(u, unpack(v)[0]) - z])

    def j_level(v):
        return np.concatenate([L.T @ model.grad_xi(u, unpack(v)[0]), np.zeros(n)])[None, :]

    def c_dual(v):
        _, eta = unpack(v)
        return v[:n] - mm.factors.solve_L(cgf_grad(dist, eta) - mbar)

    def j_dual(v):
        _, eta = unpack(v)
        W = mm.factors.solve_L(mm.factors.solve_L(cgf_hess(dist, eta)).T)   # L^-1 H L^-T
        return np.hstack([np.eye(n), -W])

    prob = nlp.NlpProblem(dim=2 * n, objective=objective, gradient=gradient,
                          eq=[nlp.ConstraintBlock(1, c_level, j_level, "level"),
                              nlp.ConstraintBlock(n, c_dual, j_dual, "dual")])

    def system(y):
        v, lam = y[:-1], y[-1]
        xi, eta = unpack(v)
        gF = L.T @ model.grad_xi(u, xi)
        A = L.T @ model.hess_xi(u, xi) @ L
        W = mm.factors.solve_L(mm.factors.solve_L(cgf_hess(dist, eta)).T)
        r = np.concatenate([v[n:] - lam * gF, v[:n] - mm.factors.solve_L(cgf_grad(dist, eta) - mbar),
                            [model.eval(u, xi) - z]])
        J = np.zeros((2 * n + 1, 2 * n + 1))
        J[:n, :n] = -lam * A
        J[:n, n:2 * n] = np.eye(n)
        J[:n, -1] = -gF
        J[n:2 * n, :n] = np.eye(n)
        J[n:2 * n, n:2 * n] = -W
        J[-1, :n] = gF
        return r, J

    loose = replace(opts.solver, tol_stationarity=max(opts.solver.tol_stationarity, 1e-4),
                    tol_feasibility=max(opts.solver.tol_feasibility, 1e-6))

    def finish(res):
        v = res.x
        xi, eta = unpack(v)
        gF = model.grad_xi(u, xi)
        lam = float(eta @ gF / (gF @ gF))
        if opts.polish:
            y, _ = _newton(system, np.concatenate([v, [lam]]), 1e-14 * (1 + abs(z) + np.linalg.norm(v)))
            v, lam = y[:-1], float(y[-1])
        xi, eta = unpack(v)
        grad = model.grad_xi(u, xi)
        kkt = max(float(np.max(np.abs(eta - lam * grad))), float(np.max(np.abs(xi - cgf_grad(dist, eta)))))
        return LdtSolution(xi_star=xi, eta_star=eta, lam=lam, rate_value=float(eta @ xi - cgf(dist, eta)),
                           kkt_residual=kkt, constraint_gap=model.eval(u, xi) - z, grad=grad,
                           kind="mixture", starts=len(starts), status=res.status)

    best, tried = None, []
    for s in starts:
        xi0 = mbar + L @ s
        if s is not zeta_g:
            r = _level_crossing(lambda t: model.eval(u, mbar + L @ (t * s / np.linalg.norm(s))) - z)
            if r is not None:
                xi0 = mbar + L @ (r * s / np.linalg.norm(s))
        try:
            _, eta0 = rate_mixture(dist, xi0)
        except NumericFailure:
            continue
        v0 = np.concatenate([mm.whiten(xi0), L.T @ eta0])
        # with the Newton polish a loose augmented-Lagrangian solve is enough to
        # enter the quadratic basin; the full tolerance is the fallback
        passes = [loose, opts.solver] if opts.polish else [opts.solver]
        for so in passes:
            res = nlp.solve(prob, v0, so)
            if res.status == "numeric-failure":
                break
            sol = finish(res)
            if _accept(sol, z):
                break
            v0 = res.x
        if res.status == "numeric-failure":
            continue
        tried.append(sol)
        if _accept(sol, z) and (best is None or sol.rate_value < best.rate_value):
            best = sol
    if best is None:
        diag = {"candidates": [(s.rate_value, s.kkt_residual, s.constraint_gap) for s in tried]}
        raise NumericFailure("mixture dominating point solve did not converge", diagnostics=diag)
    return best


def solve_ldt_minimizer(dist, model, u, z, options: LdtOptions | None = None) -> LdtSolution:
    """Dominating point of {F(u, xi) >= z} under ``dist``.

    ``GaussianSpec`` inputs use the closed-form Gaussian rate function;
    ``MixtureSpec`` inputs (any M) use the (xi, eta) dual system.
    """
    opts = options or LdtOptions()
    u = np.asarray(u, dtype=float)
    z = float(z)
    center = dist.mean if isinstance(dist, GaussianSpec) else as_mixture(dist).mean
    f0 = model.eval(u, center)
    if not f0 < z:
        raise InfeasibleThreshold(f"F(u, mean) = {f0:.6g} is not below the threshold z = {z:.6g}")
    if isinstance(dist, GaussianSpec):
        return _solve_gaussian(dist, model, u, z, opts)
    return _solve_mixture(as_mixture(dist), model, u, z, opts)


# ---------------------------------------------------------------------------
# estimates

def det_perp_parts(H, n_hat):
    """(sign, log|det_perp|) of H on the complement of n_hat."""
    H = np.asarray(H, dtype=float)
    n_hat = np.asarray(n_hat, dtype=float)
    if abs(np.linalg.norm(n_hat) - 1.0) > 1e-10:
        raise InvalidArgument("n_hat must be a unit vector")
    lu, piv = linalg.lu_factor(H, check_finite=True)
    d = np.diag(lu)
    if np.any(d == 0) or np.min(np.abs(d)) <= 1e-300:
        raise NumericFailure("singular matrix in det_perp")
    x = linalg.lu_solve((lu, piv), n_hat)
    q = float(n_hat @ x)
    swaps = np.sum(piv != np.arange(piv.size))
    sign = (-1.0) ** swaps * np.prod(np.sign(d)) * np.sign(q)
    return float(sign), float(np.sum(np.log(np.abs(d))) + np.log(abs(q)) if q != 0 else -np.inf)


def det_perp(H, n_hat) -> float:
    """Orthogonal determinant (n^T H^{-1} n) det H."""
    s, la = det_perp_parts(H, n_hat)
    return s * float(np.exp(la))


def p1_gaussian(g: GaussianSpec, model, u, z, sol: LdtSolution) -> ProbEstimate:
    r = g.mahalanobis(sol.xi_star)
    lv = normal_logcdf(-r)
    return ProbEstimate(log_value=lv, order=1, components=[ComponentTerm(1.0, lv)])


def _second_order_term(g: GaussianSpec, hess, grad_at, dist_to_mean, index):
    S12 = g.factors.sqrt
    v = S12 @ grad_at
    nv = np.linalg.norm(v)
    coef = dist_to_mean / nv
    H = np.eye(g.dim) - coef * S12 @ hess @ S12
    H = 0.5 * (H + H.T)
    min_eig = float(np.linalg.eigvalsh(H)[0])
    try:
        sign, ldp = det_perp_parts(H, v / nv)
    except NumericFailure as exc:
        raise CurvatureFailure("second-order matrix is singular", component=index, min_eig=min_eig) from exc
    if sign <= 0:
        raise CurvatureFailure("orthogonal determinant is not positive", component=index, min_eig=min_eig)
    return ldp, min_eig


def p2_gaussian(g: GaussianSpec, model, u, z, sol: LdtSolution) -> ProbEstimate:
    grad = model.grad_xi(u, sol.xi_star)
    hess = model.hess_xi(u, sol.xi_star)
    r = g.mahalanobis(sol.xi_star)
    ldp, min_eig = _second_order_term(g, hess, grad, r, 0)
    lv = normal_logcdf(-r) - 0.5 * ldp
    corr = float(np.exp(-0.5 * ldp))
    return ProbEstimate(log_value=lv, order=2, correction=corr, curvature_ok=min_eig > 1e-10,
                        components=[ComponentTerm(1.0, lv, corr, min_eig)])


def tangency_first(g_i: GaussianSpec, grad, xi_star, index: int = 0) -> TangencyPoint:
    grad = np.asarray(grad, dtype=float)
    if not np.any(grad):
        raise InvalidArgument("gradient must be nonzero")
    Sg = g_i.cov @ grad
    c = float(grad @ (np.asarray(xi_star, float) - g_i.mean)) / float(grad @ Sg)
    return TangencyPoint(xi_tilde=g_i.mean + c * Sg, lambda_tilde=c, index=index)


def p1_mixture(dist, model, u, z, sol: LdtSolution) -> ProbEstimate:
    dist = as_mixture(dist)
    grad = model.grad_xi(u, sol.xi_star)
    terms = []
    for w, c in zip(dist.weights, dist.components):
        a = float(grad @ (sol.xi_star - c.mean)) / np.linalg.norm(c.factors.sqrt @ grad)
        terms.append(ComponentTerm(float(w), float(normal_logcdf(-a))))
    lv = float(special.logsumexp([t.log_value for t in terms], b=[t.weight for t in terms]))
    return ProbEstimate(log_value=lv, order=1, components=terms)


def _qcqp_global(c, b, A):
    """Global minimizer of 0.5||v||^2 s.t. c + b.v + 0.5 v.A.v = 0 (or None)."""
    d, V = np.linalg.eigh(0.5 * (A + A.T))
    beta = V.T @ b

    def v_of(lam):
        return V @ (lam * beta / (1.0 - lam * d))

    def phi(lam):
        w = lam * beta / (1.0 - lam * d)
        return c + beta @ w + 0.5 * (d * w) @ w

    if c == 0:
        return np.zeros_like(b), 0.0
    sgn = -np.sign(c)           # root lies at lambda of this sign
    poles = [1.0 / x for x in d if x * sgn > 0]
    pole = min(poles, key=abs) if poles else None
    lo = 0.0
    if pole is None:
        hi = sgn * 1.0
        for _ in range(200):
            if np.sign(phi(hi)) != np.sign(c):
                break
            lo, hi = hi, 2 * hi
        else:
            return None
    else:
        for k in range(1, 200):
            hi = pole * (1 - 2.0 ** -k)
            if np.sign(phi(hi)) != np.sign(c):
                break
            lo = hi
        else:
            return None
    lam = optimize.brentq(phi, min(lo, hi), max(lo, hi), xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return v_of(lam), lam


def tangency_second(g_i: GaussianSpec, model, u, xi_star, index: int = 0,
                    options: LdtOptions | None = None, z=None) -> TangencyPoint:
    """Tangency point of component ``g_i`` with the quadric F_2(u, . ; xi_star) = z.

    ``z`` defaults to F(u, xi_star), i.e. the quadric through the dominating
    point.
    """
    opts = options or LdtOptions()
    xi_star = np.asarray(xi_star, dtype=float)
    grad = model.grad_xi(u, xi_star)
    hess = model.hess_xi(u, xi_star)
    F0 = model.eval(u, xi_star)
    if z is None:
        z = F0
    L, mu = g_i.factors.L, g_i.mean
    c0 = mu - xi_star
    # q(v) = const + b.v + 0.5 v.A.v  with  xi = mu + L v
    const = F0 - z + grad @ c0 + 0.5 * c0 @ hess @ c0
    b = L.T @ (grad + hess @ c0)
    A = L.T @ hess @ L

    def q(v):
        return const + b @ v + 0.5 * v @ A @ v

    def qgrad(v):
        return b + A @ v

    t1 = tangency_first(g_i, grad, xi_star, index)
    v0 = g_i.whiten(t1.xi_tilde)
    prob = nlp.NlpProblem(dim=g_i.dim, objective=lambda v: 0.5 * v @ v, gradient=lambda v: v.copy(),
                          eq=[nlp.ConstraintBlock(1, lambda v: np.array([q(v)]), lambda v: qgrad(v)[None, :], "quadric")])
    res = nlp.solve(prob, v0, opts.solver)
    v = res.x
    gq = qgrad(v)
    lam = float(v @ gq / (gq @ gq)) if gq @ gq > 0 else 0.0

    def system(y):
        vv, lm = y[:-1], y[-1]
        gq = qgrad(vv)
        r = np.concatenate([vv - lm * gq, [q(vv)]])
        J = np.block([[np.eye(vv.size) - lm * A, -gq[:, None]], [gq[None, :], np.zeros((1, 1))]])
        return r, J

    y, rn = _newton(system, np.concatenate([v, [lam]]), 1e-14 * (1 + np.linalg.norm(v)))
    v, lam = y[:-1], float(y[-1])

    S12 = g_i.factors.sqrt

    def min_eig_of(lm):
        return float(np.linalg.eigvalsh(np.eye(g_i.dim) - lm * S12 @ hess @ S12)[0])

    me = min_eig_of(lam)
    if me < -1e-6 or rn > 1e-8 * (1 + np.linalg.norm(v)):
        glob = _qcqp_global(const, b, A)
        if glob is not None:
            vg, lg = glob
            if min_eig_of(lg) >= -1e-6 and (me < -1e-6 or vg @ vg <= v @ v + 1e-12):
                v, lam, me = vg, float(lg), min_eig_of(lg)
    xi_t = mu + L @ v
    # residuals of the defining system in the original coordinates
    gF2 = grad + hess @ (xi_t - xi_star)
    r1 = abs(q(v))
    st = g_i.factors.solve(xi_t - mu)
    r2 = float(np.max(np.abs(st - lam * gF2)) / (1 + np.max(np.abs(st))))
    resid = max(r1 / (1 + abs(z)), r2)
    if resid > 1e-8:
        raise NumericFailure("tangency point does not satisfy its optimality system",
                             residual=resid, iterate=xi_t)
    return TangencyPoint(xi_tilde=xi_t, lambda_tilde=lam, index=index, min_eig=me, residual=resid)


def p2_mixture(dist, model, u, z, sol: LdtSolution, options: LdtOptions | None = None) -> ProbEstimate:
    dist = as_mixture(dist)
    xs = sol.xi_star
    grad = model.grad_xi(u, xs)
    hess = model.hess_xi(u, xs)
    terms = []
    for i, (w, c) in enumerate(zip(dist.weights, dist.components)):
        tp = tangency_second(c, model, u, xs, index=i, options=options, z=z)
        if not tp.qcqp3_ok:
            raise CurvatureFailure(f"component {i} tangency point is not a global minimizer",
                                   component=i, min_eig=tp.min_eig)
        gF2 = grad + hess @ (tp.xi_tilde - xs)
        r = c.mahalanobis(tp.xi_tilde)
        ldp, me = _second_order_term(c, hess, gF2, r, i)
        corr = float(np.exp(-0.5 * ldp))
        terms.append(ComponentTerm(float(w), float(normal_logcdf(-r)) - 0.5 * ldp, corr, tp.min_eig, tp))
    lv = float(special.logsumexp([t.log_value for t in terms], b=[t.weight for t in terms]))
    ok = all(t.min_eig > -1e-6 for t in terms)
    base = float(special.logsumexp([t.log_value - np.log(t.correction) for t in terms],
                                   b=[t.weight for t in terms]))
    return ProbEstimate(log_value=lv, order=2, correction=float(np.exp(lv - base)), curvature_ok=ok,
                        components=terms)


def estimate(dist, model, u, z, order: int = 1, sol: LdtSolution | None = None,
             options: LdtOptions | None = None):
    """Dominating point plus the requested estimate; returns (ProbEstimate, LdtSolution)."""
    if order not in (1, 2):
        raise InvalidArgument("order must be 1 or 2")
    if sol is None:
        sol = solve_ldt_minimizer(dist, model, u, z, options)
    if isinstance(dist, GaussianSpec):
        est = (p1_gaussian if order == 1 else p2_gaussian)(dist, model, u, z, sol)
    elif order == 1:
        est = p1_mixture(dist, model, u, z, sol)
    else:
        est = p2_mixture(dist, model, u, z, sol, options)
    return est, sol
