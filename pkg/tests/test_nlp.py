import numpy as np
import pytest
from scipy.optimize import rosen, rosen_der

from ldtcc import nlp
from ldtcc.errors import InvalidArgument
from ldtcc.selftest import qp_suite


def projection_problem():
    # min |x|^2 s.t. x1 + x2 = 1
    return nlp.NlpProblem(
        dim=2, objective=lambda x: float(x @ x), gradient=lambda x: 2 * x,
        eq=[nlp.ConstraintBlock(1, lambda x: np.array([x[0] + x[1] - 1.0]), lambda x: np.ones((1, 2)))])


def test_projection_example():
    res = nlp.solve(projection_problem(), np.array([2.0, -3.0]))
    assert res.status == "optimal"
    assert np.allclose(res.x, [0.5, 0.5], atol=1e-8)
    assert res.eq_multipliers[0] == pytest.approx(-1.0, abs=1e-6)
    assert res.stationarity <= 1e-6 and res.feasibility <= 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_linear_ldt_closed_form(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=5)
    z = 3.0
    prob = nlp.NlpProblem(dim=5, objective=lambda x: 0.5 * x @ x, gradient=lambda x: x,
                          eq=[nlp.ConstraintBlock(1, lambda x: np.array([a @ x - z]), lambda x: a[None, :])])
    res = nlp.solve(prob, np.zeros(5))
    assert res.ok
    assert np.allclose(res.x, a * z / (a @ a), atol=1e-8)


def test_rosenbrock_with_bounds():
    prob = nlp.NlpProblem(dim=2, objective=rosen, gradient=rosen_der, lower=[-2.0, -2.0], upper=[2.0, 2.0])
    res = nlp.solve(prob, np.array([-1.2, 1.0]), nlp.SolverOptions(tol_stationarity=1e-9))
    assert res.ok
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-5)


def test_fd_gradient_mode():
    prob = nlp.NlpProblem(dim=2, objective=lambda x: float(x @ x),
                          eq=[nlp.ConstraintBlock(1, lambda x: np.array([x[0] + x[1] - 1.0]))])
    res = nlp.solve(prob, np.zeros(2), nlp.SolverOptions(gradient_mode="fd"))
    assert res.ok
    assert np.allclose(res.x, [0.5, 0.5], atol=1e-6)


def test_inequality_multiplier_nonnegative():
    # min (x-2)^2 s.t. x <= 1 -> x = 1, mu = 2
    prob = nlp.NlpProblem(dim=1, objective=lambda x: float((x[0] - 2) ** 2), gradient=lambda x: 2 * (x - 2),
                          ineq=[nlp.ConstraintBlock(1, lambda x: x - 1.0, lambda x: np.ones((1, 1)))])
    res = nlp.solve(prob, np.zeros(1))
    assert res.ok
    assert res.x[0] == pytest.approx(1.0, abs=1e-7)
    assert res.ineq_multipliers[0] == pytest.approx(2.0, abs=1e-5)
    assert np.all(res.ineq_multipliers >= 0)


class TestKktResidual:
    def test_at_optimum(self):
        r = nlp.kkt_residual(projection_problem(), [0.5, 0.5], ([-1.0], []))
        assert max(r) <= 1e-8

    def test_non_stationary(self):
        stat, _, _ = nlp.kkt_residual(projection_problem(), [3.0, -1.0], ([0.0], []))
        assert stat > 0.1

    def test_feasible_non_optimal(self):
        stat, feas, _ = nlp.kkt_residual(projection_problem(), [1.0, 0.0], ([-1.0], []))
        assert feas <= 1e-10
        assert stat > 0

    def test_bad_multiplier_size(self):
        with pytest.raises(InvalidArgument):
            nlp.kkt_residual(projection_problem(), [0.5, 0.5], ([1.0, 2.0], []))


class TestFailures:
    def test_callback_failure_at_iterate(self):
        def f(x):
            raise ValueError("outside domain")
        prob = nlp.NlpProblem(dim=1, objective=f, gradient=lambda x: 2 * x)
        res = nlp.solve(prob, np.array([0.25]))
        assert res.status == "numeric-failure"
        assert np.array_equal(res.x, [0.25])

    def test_trial_failure_backtracks(self):
        # failures at trial points shorten the step instead of aborting
        def f(x):
            if x[0] > 0.5:
                raise ValueError("outside domain")
            return float((x[0] + 1) ** 2)
        prob = nlp.NlpProblem(dim=1, objective=f, gradient=lambda x: 2 * (x + 1))
        res = nlp.solve(prob, np.array([0.4]))
        assert res.ok
        assert res.x[0] == pytest.approx(-1.0, abs=1e-6)

    def test_unbounded_below(self):
        prob = nlp.NlpProblem(dim=1, objective=lambda x: -float(x[0]) ** 3, gradient=lambda x: -3 * x**2)
        res = nlp.solve(prob, np.ones(1))
        assert res.status == "numeric-failure"
        assert "unbounded" in res.message

    def test_infeasible_constraints(self):
        prob = nlp.NlpProblem(dim=1, objective=lambda x: float(x[0] ** 2), gradient=lambda x: 2 * x,
                              eq=[nlp.ConstraintBlock(1, lambda x: np.array([x[0] ** 2 + 1.0]),
                                                      lambda x: np.array([[2 * x[0]]]))])
        res = nlp.solve(prob, np.ones(1), nlp.SolverOptions(max_outer=30))
        assert res.status in ("infeasible", "max-iter")
        assert not res.ok


class TestOptionsAndProblem:
    def test_invalid_options(self):
        with pytest.raises(InvalidArgument):
            nlp.SolverOptions(tol_stationarity=0.0)
        with pytest.raises(InvalidArgument):
            nlp.SolverOptions(rho_growth=1.0)
        with pytest.raises(InvalidArgument):
            nlp.SolverOptions(gradient_mode="exact")

    def test_defaults(self):
        o = nlp.SolverOptions()
        assert (o.tol_stationarity, o.tol_feasibility, o.max_outer, o.max_inner, o.rho0, o.rho_growth) == \
            (1e-6, 1e-8, 100, 500, 10.0, 10.0)

    def test_crossed_bounds(self):
        with pytest.raises(InvalidArgument):
            nlp.NlpProblem(dim=1, objective=lambda x: 0.0, lower=[1.0], upper=[0.0])

    def test_x0_projected(self):
        prob = nlp.NlpProblem(dim=1, objective=lambda x: float(x[0] ** 2), gradient=lambda x: 2 * x,
                              lower=[1.0], upper=[3.0])
        res = nlp.solve(prob, np.array([10.0]))
        assert res.ok and res.x[0] == pytest.approx(1.0)


def test_deterministic():
    cases = qp_suite(3)
    c = cases[6]
    a = nlp.solve(c.problem, c.x0)
    b = nlp.solve(c.problem, c.x0)
    assert np.array_equal(a.x, b.x)
    assert a.history == b.history


def test_optimal_implies_residuals_within_tolerance():
    opts = nlp.SolverOptions()
    for c in qp_suite(11):
        res = nlp.solve(c.problem, c.x0, opts)
        if res.ok:
            assert res.stationarity <= opts.tol_stationarity
            assert res.feasibility <= opts.tol_feasibility
            assert res.complementarity <= opts.tol_stationarity


def test_feasibility_nonincreasing_after_penalty_stabilizes():
    for c in qp_suite(7):
        res = nlp.solve(c.problem, c.x0)
        h = res.history
        if not h:
            continue
        rho_final = h[-1]["rho"]
        tail = [r["feasibility"] for r in h if r["rho"] == rho_final]
        for prev, cur in zip(tail, tail[1:]):
            assert cur <= 1.01 * prev + 1e-15


@pytest.mark.parametrize("case", qp_suite(7), ids=lambda c: c.name)
def test_qp_suite(case):
    opts = nlp.SolverOptions(tol_stationarity=1e-9, tol_feasibility=1e-10)
    res = nlp.solve(case.problem, case.x0, opts)
    assert res.ok, res.message
    assert np.max(np.abs(res.x - case.x_star)) <= 1e-6
