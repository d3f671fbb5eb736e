"""Small dense nonlinear programming by an augmented Lagrangian method.

    minimize f(x)  subject to  c_E(x) = 0,  c_I(x) <= 0,  lower <= x <= upper

The outer loop updates multipliers (lambda <- lambda + rho c) and grows the
penalty whenever the constraint violation fails to shrink by a factor of
four.  Inequalities enter through the positive-part (PHR) penalty.  Each
subproblem is a bound-constrained minimization by a projected
quasi-Newton iteration with Armijo backtracking.  Its model Hessian is a
compact limited-memory BFGS approximation of the Lagrangian plus the exact
Gauss-Newton term rho J^T J of the penalty, which the Jacobians already
provide; without it the quasi-Newton update has to relearn a curvature that
grows with rho.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import splu

from .errors import InvalidArgument

log = logging.getLogger(__name__)

STATUSES = ("optimal", "max-iter", "infeasible", "numeric-failure")


@dataclass
class ConstraintBlock:
    """A group of constraints sharing one callback.

    ``jac`` may be omitted, in which case the block is differentiated by
    central finite differences.
    """

    size: int
    fun: Callable
    jac: Optional[Callable] = None
    name: str = ""


@dataclass
class NlpProblem:
    dim: int
    objective: Callable
    gradient: Optional[Callable] = None
    eq: Sequence[ConstraintBlock] = ()
    ineq: Sequence[ConstraintBlock] = ()
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.eq = list(self.eq)
        self.ineq = list(self.ineq)
        self.lower = np.full(self.dim, -np.inf) if self.lower is None else np.asarray(self.lower, float).copy()
        self.upper = np.full(self.dim, np.inf) if self.upper is None else np.asarray(self.upper, float).copy()
        if self.lower.shape != (self.dim,) or self.upper.shape != (self.dim,):
            raise InvalidArgument("bounds must have length dim")
        if np.any(self.lower > self.upper):
            raise InvalidArgument("lower bound exceeds upper bound")

    @property
    def n_eq(self):
        return sum(b.size for b in self.eq)

    @property
    def n_ineq(self):
        return sum(b.size for b in self.ineq)


@dataclass
class SolverOptions:
    tol_stationarity: float = 1e-6
    tol_feasibility: float = 1e-8
    max_outer: int = 100
    max_inner: int = 500
    rho0: float = 10.0
    rho_growth: float = 10.0
    rho_max: float = 1e12
    gradient_mode: str = "analytic"   # or "fd"
    fd_step: float = 1e-6
    memory: int = 10
    armijo: float = 1e-4
    backtrack: float = 0.5
    check_jacobians: bool = False

    def __post_init__(self):
        if self.tol_stationarity <= 0 or self.tol_feasibility <= 0:
            raise InvalidArgument("tolerances must be positive")
        if self.rho_growth <= 1:
            raise InvalidArgument("penalty growth factor must exceed 1")
        if self.gradient_mode not in ("analytic", "fd"):
            raise InvalidArgument("gradient_mode must be 'analytic' or 'fd'")


@dataclass
class NlpResult:
    x: np.ndarray
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    status: str
    stationarity: float
    feasibility: float
    complementarity: float
    iterations: int
    inner_iterations: int = 0
    objective: float = np.nan
    message: str = ""
    history: list = field(default_factory=list)

    @property
    def ok(self):
        return self.status == "optimal"


class _EvalFailure(Exception):
    pass


def _fd_jac(fun, x, step):
    h = step * (1.0 + np.abs(x))
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h[k]
        cols.append((np.atleast_1d(fun(x + e)) - np.atleast_1d(fun(x - e))) / (2 * h[k]))
    return np.array(cols).T.reshape(-1, x.size)


class _Evaluator:
    """Stacks callbacks and supplies derivatives (analytic or FD)."""

    def __init__(self, problem: NlpProblem, opts: SolverOptions):
        self.p = problem
        self.fd = opts.gradient_mode == "fd"
        self.step = opts.fd_step

    def f(self, x):
        return float(self.p.objective(x))

    def grad(self, x):
        if self.p.gradient is None or self.fd:
            return _fd_jac(lambda y: np.array([self.p.objective(y)]), x, self.step)[0]
        return np.asarray(self.p.gradient(x), dtype=float)

    def _vals(self, blocks, x):
        if not blocks:
            return np.zeros(0)
        out = [np.atleast_1d(np.asarray(b.fun(x), dtype=float)) for b in blocks]
        for b, v in zip(blocks, out):
            if v.shape != (b.size,):
                raise InvalidArgument(f"constraint block {b.name!r} returned shape {v.shape}, expected ({b.size},)")
        return np.concatenate(out)

    def _jac(self, blocks, x):
        if not blocks:
            return np.zeros((0, x.size))
        mats = []
        for b in blocks:
            if b.jac is None or self.fd:
                J = _fd_jac(b.fun, x, self.step)
            else:
                J = b.jac(x)
                if not sparse.issparse(J):
                    J = np.asarray(J, dtype=float).reshape(b.size, x.size)
            mats.append(J)
        if any(sparse.issparse(J) for J in mats):
            return sparse.vstack(mats, format="csr")
        return np.vstack(mats)

    def ceq(self, x):
        return self._vals(self.p.eq, x)

    def cin(self, x):
        return self._vals(self.p.ineq, x)

    def jeq(self, x):
        return self._jac(self.p.eq, x)

    def jin(self, x):
        return self._jac(self.p.ineq, x)


def _project(x, lo, hi):
    return np.minimum(np.maximum(x, lo), hi)


def _proj_grad_norm(x, g, lo, hi):
    return float(np.max(np.abs(x - _project(x - g, lo, hi)), initial=0.0))


def kkt_residual(problem: NlpProblem, x, multipliers, options: SolverOptions | None = None):
    """(stationarity, feasibility, complementarity) as infinity norms.

    ``multipliers`` is ``(eq_multipliers, ineq_multipliers)``.  Bound
    multipliers are folded in through the projected gradient of the
    Lagrangian f + lambda.c_E + mu.c_I.
    """
    ev = _Evaluator(problem, options or SolverOptions())
    x = np.asarray(x, dtype=float)
    lam, mu = (np.asarray(m, dtype=float).reshape(-1) for m in multipliers)
    if lam.size != problem.n_eq or mu.size != problem.n_ineq:
        raise InvalidArgument("multipliers are not dimensioned to the constraints")
    cE, cI = ev.ceq(x), ev.cin(x)
    g = ev.grad(x)
    if cE.size:
        g = g + ev.jeq(x).T @ lam
    if cI.size:
        g = g + ev.jin(x).T @ mu
    stat = _proj_grad_norm(x, g, problem.lower, problem.upper)
    feas = max(np.max(np.abs(cE), initial=0.0), np.max(np.maximum(cI, 0.0), initial=0.0),
               np.max(np.maximum(problem.lower - x, 0.0), initial=0.0),
               np.max(np.maximum(x - problem.upper, 0.0), initial=0.0))
    comp = float(np.max(np.abs(mu * cI), initial=0.0)) if cI.size else 0.0
    return stat, float(feas), comp


class _CompactBFGS:
    """Limited-memory BFGS in compact form, B = gamma I - W N^{-1} W^T."""

    def __init__(self, memory):
        self.memory = memory
        self.S, self.Y = [], []
        self.gamma = 1.0

    def clear(self):
        self.S.clear()
        self.Y.clear()

    def _parts(self):
        S = np.array(self.S).T
        Y = np.array(self.Y).T
        P = S.T @ Y
        Lm = np.tril(P, -1)
        D = np.diag(np.diag(P))
        N = np.block([[self.gamma * (S.T @ S), Lm], [Lm.T, -D]])
        W = np.hstack([self.gamma * S, Y])
        return W, N

    def times(self, v):
        if not self.S:
            return self.gamma * v
        W, N = self._parts()
        return self.gamma * v - W @ np.linalg.solve(N, W.T @ v)

    def update(self, s, y):
        """Powell-damped update; keeps B positive definite on nonconvex Lagrangians."""
        Bs = self.times(s)
        sBs = float(s @ Bs)
        sy = float(s @ y)
        if not (sBs > 0 and np.isfinite(sBs)):
            return
        if sy < 0.2 * sBs:
            th = 0.8 * sBs / (sBs - sy)
            y = th * y + (1.0 - th) * Bs
            sy = float(s @ y)
        if sy <= 1e-16 * np.linalg.norm(s) * np.linalg.norm(y):
            return
        self.S.append(s.copy())
        self.Y.append(y.copy())
        if len(self.S) > self.memory:
            self.S.pop(0)
            self.Y.pop(0)
        self.gamma = float(np.clip((y @ y) / sy, 1e-8, 1e8))


def _structured_direction(g, J, act, rho, qn: _CompactBFGS, free):
    """Solve (B_qn + rho J_a^T J_a) d = -g on the free variables.

    J_a are the penalized constraint rows (equalities and active PHR rows);
    the low-rank quasi-Newton part is handled by the Woodbury identity.
    Returns None when the system cannot be solved.
    """
    idx = np.flatnonzero(free)
    if idx.size == 0:
        return np.zeros_like(g)
    gf = g[idx]
    if J is not None and J.shape[0] and np.any(act):
        Ja = J[np.flatnonzero(act)]
        Jf = Ja[:, idx]
    else:
        Jf = None
    try:
        if Jf is not None and sparse.issparse(Jf):
            A = (qn.gamma * sparse.identity(idx.size, format="csc") + rho * (Jf.T @ Jf)).tocsc()
            lu = splu(A)
            solveA = lu.solve
        else:
            A = qn.gamma * np.eye(idx.size)
            if Jf is not None:
                Jf = np.asarray(Jf)
                A = A + rho * (Jf.T @ Jf)
            cf = linalg.cho_factor(A)
            solveA = lambda r: linalg.cho_solve(cf, r)  # noqa: E731
        ag = solveA(gf)
        if qn.S:
            W, N = qn._parts()
            Wf = W[idx]
            AW = solveA(Wf)
            AW = AW.reshape(idx.size, -1)
            M2 = N - Wf.T @ AW
            ag = ag + AW @ np.linalg.solve(M2, Wf.T @ ag)
    except (np.linalg.LinAlgError, RuntimeError, ValueError):
        return None
    if not np.all(np.isfinite(ag)):
        return None
    d = np.zeros_like(g)
    d[idx] = -ag
    return d


def _inner_minimize(fg, x, lo, hi, gtol, max_iter, opts, rho):
    """Projected quasi-Newton with Armijo backtracking; returns (x, f, g, iters).

    ``fg`` returns (merit, gradient, stacked constraint Jacobian, multiplier
    estimates, penalized-row mask).  The search direction combines a
    limited-memory model of the Lagrangian Hessian with the exact
    Gauss-Newton term of the penalty.
    """
    f, g, J, w, act = fg(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise _EvalFailure("non-finite merit at the start of a subproblem")
    qn = _CompactBFGS(opts.memory)
    it = 0
    for it in range(1, max_iter + 1):
        pg = _proj_grad_norm(x, g, lo, hi)
        if pg <= gtol:
            return x, f, g, it - 1
        tiny = 1e-12 * (1.0 + np.abs(x))
        blocked = ((x <= lo + tiny) & (g > 0)) | ((x >= hi - tiny) & (g < 0))
        free = ~blocked
        d = _structured_direction(g, J, act, rho, qn, free)
        if d is None or not (g @ d < 0):
            qn.clear()
            qn.gamma = max(1.0, float(np.max(np.abs(g))))
            d = -np.where(free, g, 0.0) / qn.gamma
        t = 1.0
        accepted = False
        for _ in range(60):
            xt = _project(x + t * d, lo, hi)
            step = xt - x
            if not np.any(step):
                break
            try:
                ft, gt, Jt, wt, actt = fg(xt)
            except _EvalFailure:
                ft, gt = np.inf, None
            if np.isfinite(ft) and gt is not None and np.all(np.isfinite(gt)):
                if ft <= f + opts.armijo * (g @ step):
                    accepted = True
                    break
                # near a minimizer the predicted decrease drops below rounding in f;
                # then a flat merit with a smaller projected gradient is progress
                if ft <= f + 1e-13 * (1.0 + abs(f)) and _proj_grad_norm(xt, gt, lo, hi) < pg:
                    accepted = True
                    break
            t *= opts.backtrack
        if not accepted:
            if qn.S:
                qn.clear()
                continue
            return x, f, g, it
        # curvature pair of the Lagrangian at the new multiplier estimates
        y = gt - g
        if J is not None and J.shape[0]:
            y = y - J.T @ (wt - w)
        qn.update(step, np.asarray(y).ravel())
        x, f, g, J, w, act = xt, ft, gt, Jt, wt, actt
    return x, f, g, it


def solve(problem: NlpProblem, x0, options: SolverOptions | None = None, eq_mult0=None, ineq_mult0=None) -> NlpResult:
    """Solve ``problem`` from ``x0`` (projected onto the bounds)."""
    opts = options or SolverOptions()
    ev = _Evaluator(problem, opts)
    lo, hi = problem.lower, problem.upper
    x = _project(np.asarray(x0, dtype=float).copy(), lo, hi)
    if x.shape != (problem.dim,):
        raise InvalidArgument(f"x0 has shape {x.shape}, expected ({problem.dim},)")
    nE, nI = problem.n_eq, problem.n_ineq
    lam = np.zeros(nE) if eq_mult0 is None else np.asarray(eq_mult0, float).copy()
    mu = np.zeros(nI) if ineq_mult0 is None else np.maximum(np.asarray(ineq_mult0, float), 0.0)
    rho = opts.rho0
    history = []

    def fail(msg, xf):
        return NlpResult(x=xf, eq_multipliers=lam, ineq_multipliers=mu, status="numeric-failure",
                         stationarity=np.inf, feasibility=np.inf, complementarity=np.inf,
                         iterations=len(history), message=msg, history=history)

    if opts.check_jacobians:
        _check_jacobians(problem, x, opts)

    def merit(xv):
        try:
            f = ev.f(xv)
            g = ev.grad(xv)
            val = f
            Js, ws, acts = [], [], []
            if nE:
                c = ev.ceq(xv)
                w = lam + rho * c
                val += lam @ c + 0.5 * rho * (c @ c)
                JE = ev.jeq(xv)
                g = g + JE.T @ w
                Js.append(JE)
                ws.append(w)
                acts.append(np.ones(nE, dtype=bool))
            if nI:
                ci = ev.cin(xv)
                w = np.maximum(0.0, mu + rho * ci)
                val += (w @ w - mu @ mu) / (2.0 * rho)
                JI = ev.jin(xv)
                g = g + JI.T @ w
                Js.append(JI)
                ws.append(w)
                acts.append(mu + rho * ci > 0)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
            if isinstance(exc, InvalidArgument):
                raise
            raise _EvalFailure(str(exc)) from exc
        if f < -1e30:
            raise _Unbounded(xv)
        if not Js:
            return val, np.asarray(g).ravel(), None, np.zeros(0), np.zeros(0, dtype=bool)
        if any(sparse.issparse(J) for J in Js):
            J = sparse.vstack([sparse.csr_matrix(J) for J in Js], format="csr")
        else:
            J = np.vstack(Js)
        return val, np.asarray(g).ravel(), J, np.concatenate(ws), np.concatenate(acts)

    gtol = max(1e-2, opts.tol_stationarity)
    prev_viol = np.inf
    inner_total = 0
    status, message = "max-iter", "outer iteration limit reached"
    stat = feas = comp = np.inf
    for outer in range(1, opts.max_outer + 1):
        try:
            x, _, _, nit = _inner_minimize(merit, x, lo, hi, gtol, opts.max_inner, opts, rho)
        except _EvalFailure as exc:
            return fail(f"callback evaluation failed: {exc}", x)
        except _Unbounded as exc:
            return fail("objective unbounded below", exc.args[0])
        inner_total += nit
        try:
            cE, cI = ev.ceq(x), ev.cin(x)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
            return fail(f"callback evaluation failed: {exc}", x)
        viol = max(np.max(np.abs(cE), initial=0.0), np.max(np.abs(np.maximum(cI, -mu / rho)), initial=0.0))
        lam = lam + rho * cE
        mu = np.maximum(0.0, mu + rho * cI)
        stat, feas, comp = kkt_residual(problem, x, (lam, mu), opts)
        history.append({"outer": outer, "rho": rho, "feasibility": feas, "stationarity": stat,
                        "complementarity": comp, "inner": nit})
        log.debug("outer %d rho %.1e feas %.2e stat %.2e", outer, rho, feas, stat)
        if not (np.isfinite(stat) and np.isfinite(feas)):
            return fail("non-finite residuals", x)
        if stat <= opts.tol_stationarity and feas <= opts.tol_feasibility and comp <= opts.tol_stationarity:
            status, message = "optimal", "converged"
            break
        if viol > 0.25 * prev_viol:
            if rho >= opts.rho_max:
                status, message = "infeasible", "penalty limit reached without feasibility"
                break
            rho = min(rho * opts.rho_growth, opts.rho_max)
        prev_viol = viol
        gtol = max(0.1 * gtol, 0.5 * opts.tol_stationarity)
    else:
        if feas > 1e-4:
            status, message = "infeasible", "outer iteration limit reached while infeasible"
    if status == "infeasible" and feas <= opts.tol_feasibility:
        status = "max-iter"
    try:
        fval = ev.f(x)
    except Exception:  # noqa: BLE001 - objective is reported, not used
        fval = np.nan
    return NlpResult(x=x, eq_multipliers=lam, ineq_multipliers=mu, status=status, stationarity=stat,
                     feasibility=feas, complementarity=comp, iterations=len(history),
                     inner_iterations=inner_total, objective=fval, message=message, history=history)


class _Unbounded(Exception):
    pass


def _check_jacobians(problem, x, opts):
    for kind, blocks in (("eq", problem.eq), ("ineq", problem.ineq)):
        for b in blocks:
            if b.jac is None:
                continue
            J = b.jac(x)
            J = J.toarray() if sparse.issparse(J) else np.asarray(J, float).reshape(b.size, x.size)
            Jfd = _fd_jac(b.fun, x, opts.fd_step)
            err = np.max(np.abs(J - Jfd)) / max(np.max(np.abs(Jfd)), 1e-12)
            if err > 1e-4:
                log.warning("%s block %r: analytic Jacobian differs from FD (rel %.2e)", kind, b.name, err)
