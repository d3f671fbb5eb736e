"""Built-in checks: model derivatives and a suite of convex QPs.

Each QP is manufactured from a chosen solution x*, an active set and
nonnegative multipliers; the linear term is then fixed so that the KKT
conditions hold at x*.  Strict convexity makes x* the unique minimizer, so
the suite needs no external reference solver.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nlp
from .limit_state import (AdvectionDiffusionModel, PortfolioModel, ShortColumnModel, check_derivatives,
                          pde_distribution, short_column_gaussian)


@dataclass
class QpCase:
    name: str
    problem: nlp.NlpProblem
    x0: np.ndarray
    x_star: np.ndarray


def _spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    d = np.geomspace(1.0, cond, n)
    return (Q * d) @ Q.T


def make_qp(rng, n, n_eq=0, n_ineq=0, n_active=0, n_bound=0, cond=10.0, name="qp"):
    """min 1/2 x'Px + c'x  s.t.  Ex = e, Gx <= h, x >= lower on the first n_bound coordinates."""
    P = _spd(rng, n, cond)
    x_star = rng.normal(size=n)
    E = rng.normal(size=(n_eq, n))
    e = E @ x_star
    G = rng.normal(size=(n_ineq, n))
    slack = np.where(np.arange(n_ineq) < n_active, 0.0, rng.uniform(0.5, 2.0, n_ineq))
    h = G @ x_star + slack
    mu = np.where(slack == 0.0, rng.uniform(0.5, 2.0, n_ineq), 0.0)
    lam = rng.normal(size=n_eq)
    lower = np.full(n, -np.inf)
    nu = np.zeros(n)
    lower[:n_bound] = x_star[:n_bound]          # active lower bounds
    nu[:n_bound] = rng.uniform(0.5, 2.0, n_bound)
    # stationarity: P x + c + E'lam + G'mu - nu = 0
    c = -(P @ x_star + E.T @ lam + G.T @ mu - nu)
    eq = [nlp.ConstraintBlock(n_eq, lambda x: E @ x - e, lambda x: E, "eq")] if n_eq else []
    ineq = [nlp.ConstraintBlock(n_ineq, lambda x: G @ x - h, lambda x: G, "ineq")] if n_ineq else []
    prob = nlp.NlpProblem(dim=n, objective=lambda x: 0.5 * x @ P @ x + c @ x, gradient=lambda x: P @ x + c,
                          eq=eq, ineq=ineq, lower=lower)
    x0 = np.maximum(x_star + rng.normal(size=n), np.where(np.isfinite(lower), lower, -np.inf))
    return QpCase(name, prob, x0, x_star)


def qp_suite(seed=7):
    """Ten convex QPs covering unconstrained, equality, inequality and bound cases."""
    rng = np.random.default_rng(seed)
    shapes = [
        ("unconstrained", dict(n=5)),
        ("ill-conditioned", dict(n=8, cond=1e4)),
        ("equality", dict(n=6, n_eq=2)),
        ("inactive-inequality", dict(n=6, n_ineq=3)),
        ("active-inequality", dict(n=6, n_ineq=3, n_active=2)),
        ("bounds", dict(n=5, n_bound=2)),
        ("mixed", dict(n=10, n_eq=2, n_ineq=4, n_active=2, n_bound=2)),
        ("degenerate-count", dict(n=4, n_eq=1, n_ineq=3, n_active=3)),
        ("larger", dict(n=30, n_eq=5, n_ineq=10, n_active=4, n_bound=3, cond=100.0)),
        ("bounds-and-equality", dict(n=7, n_eq=3, n_bound=3)),
    ]
    return [make_qp(rng, name=name, **kw) for name, kw in shapes]


def run_qp_suite(seed=7, tol=1e-5, options=None):
    """Solve every QP; returns a list of (name, passed, error, status)."""
    opts = options or nlp.SolverOptions(tol_stationarity=1e-9, tol_feasibility=1e-10, max_outer=100)
    out = []
    for case in qp_suite(seed):
        res = nlp.solve(case.problem, case.x0, opts)
        err = float(np.max(np.abs(res.x - case.x_star)) / max(1.0, np.max(np.abs(case.x_star))))
        out.append((case.name, bool(res.ok and err <= tol), err, res.status))
    return out


def derivative_cases():
    """(name, model, u, xi) triples at representative points of the three applications."""
    rng = np.random.default_rng(3)
    n = 4
    port = PortfolioModel.from_log_returns(rng.uniform(-1e-4, 5e-4, n), rng.uniform(0.01, 0.02, n), 10.0)
    u_p = rng.dirichlet(np.ones(n))
    xi_p = 0.05 * rng.normal(size=n)
    sc = ShortColumnModel()
    g = short_column_gaussian()
    pde = AdvectionDiffusionModel(m=15)
    pd = pde_distribution()
    return [
        ("portfolio", port, u_p, xi_p),
        ("short_column", sc, np.array([10.0, 20.0]), g.mean.copy()),
        ("pde", pde, np.full(pde.dim_u, -1.2), pd.mean + 0.05),
    ]


def run_derivative_checks():
    return [(name, check_derivatives(model, u, xi)) for name, model, u, xi in derivative_cases()]


def run_all(echo=print):
    """Derivative checks then the QP suite; returns True when everything passes."""
    t0 = time.perf_counter()
    ok = True
    for name, rep in run_derivative_checks():
        echo(f"derivatives {name:14s} {rep}")
        ok &= rep.passed
    for name, passed, err, status in run_qp_suite():
        echo(f"qp {name:22s} {'pass' if passed else 'FAIL'} err={err:.2e} status={status}")
        ok &= passed
    echo(f"selftest {'passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f} s")
    return ok
