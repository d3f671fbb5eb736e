import math

import numpy as np
import pytest

from ldtcc import formulations as fm
from ldtcc import ldt, nlp
from ldtcc.distributions import GaussianSpec, MixtureSpec, fit_em, normal_cdf_inv, sample
from ldtcc.errors import InvalidArgument, LdtError
from ldtcc.limit_state import LinearModel, PortfolioModel, ShortColumnModel, short_column_gaussian
from ldtcc.mc import mc_probability, var_quantile

from .helpers import random_mixture


def area(u):
    return float(u[0] * u[1])


def area_grad(u):
    return np.array([u[1], u[0]])


def sc_spec(alpha, dist=None, model=None):
    model = model or ShortColumnModel()
    return fm.ChanceSpec(model=model, dist=dist or short_column_gaussian(), alpha=alpha, z=1.0,
                         objective=area, objective_grad=area_grad, lower=model.lower, upper=model.upper)


def linear_u_spec(dist, alpha, a, b, z=4.0):
    # F = a.xi + b.u, J = 1/2 |u|^2 on a box
    model = LinearModel(a, b)
    m = len(b)
    return fm.ChanceSpec(model=model, dist=dist, alpha=alpha, z=z, objective=lambda u: 0.5 * float(u @ u),
                         objective_grad=lambda u: u, lower=np.full(m, -5.0), upper=np.full(m, 5.0),
                         u0=np.full(m, -1.0))


def small_portfolio(n=3, seed=0):
    rng = np.random.default_rng(seed)
    sd = rng.uniform(0.01, 0.03, n)
    model = PortfolioModel.from_log_returns(rng.uniform(0, 1e-3, n), sd, 10.0)
    return model, GaussianSpec(np.zeros(n), np.diag(sd**2))


def eq_residual(built, x):
    return max(np.max(np.abs(b.fun(x))) for b in built.problem.eq)


class TestSpec:
    def test_alpha_range(self):
        with pytest.raises(InvalidArgument):
            sc_spec(1.0)
        with pytest.raises(InvalidArgument):
            sc_spec(0.0)

    def test_max_z_excludes_threshold(self):
        model, g = small_portfolio()
        with pytest.raises(InvalidArgument):
            fm.ChanceSpec(model=model, dist=g, alpha=0.1, z=1.0, sense="max_z")

    def test_initial_u(self):
        assert np.allclose(sc_spec(0.1).initial_u(), [10.0, 20.0])
        model, g = small_portfolio(4)
        assert np.allclose(fm.var_spec(model, g, 0.1).initial_u(), 0.25)

    def test_gaussian_builder_rejects_mixture(self):
        from ldtcc.limit_state import short_column_mixture
        with pytest.raises(InvalidArgument):
            fm.build_gaussian_cc(sc_spec(0.1, short_column_mixture()))


class TestLayout:
    def test_round_trip_affine(self):
        lay = fm.Layout()
        lay.add("u", 2)
        L = np.array([[2.0, 0.0], [0.5, 1.0]])
        lay.add("xi", 2, shift=np.array([1.0, -1.0]), T=L)
        x = np.array([0.1, 0.2, 0.3, 0.4])
        parts = lay.unpack(x)
        assert np.allclose(parts["xi"], L @ x[2:] + [1.0, -1.0])
        assert np.allclose(lay.pack(parts), x)

    def test_duplicate_and_missing(self):
        lay = fm.Layout()
        lay.add("u", 1)
        with pytest.raises(InvalidArgument):
            lay.add("u", 1)
        with pytest.raises(InvalidArgument):
            lay.pack({})

    @pytest.mark.parametrize("method", ["g1", "g2", "m1", "m2", "saa", "cvar", "var"])
    def test_every_builder_round_trips(self, method):
        from ldtcc.limit_state import short_column_mixture
        rng = np.random.default_rng(1)
        X = sample(short_column_gaussian(), 20, 3)
        if method == "var":
            model, g = small_portfolio()
            built = fm.build_var_max(fm.var_spec(model, g, 0.05))
        else:
            built = {"g1": lambda: fm.build_gaussian_cc(sc_spec(0.1), 1),
                     "g2": lambda: fm.build_gaussian_cc(sc_spec(0.1), 2),
                     "m1": lambda: fm.build_mixture_cc_first(sc_spec(0.1, short_column_mixture())),
                     "m2": lambda: fm.build_mixture_cc_second(sc_spec(0.1, short_column_mixture())),
                     "saa": lambda: fm.build_saa(sc_spec(0.1), X),
                     "cvar": lambda: fm.build_cvar(sc_spec(0.1), X)}[method]()
        covered = np.zeros(built.layout.dim, dtype=int)
        for name in built.layout.names:
            covered[built.layout[name]] += 1
        assert np.all(covered == 1)
        for _ in range(3):
            x = rng.normal(size=built.layout.dim)
            assert np.allclose(built.layout.pack(built.recover(x)), x, atol=1e-10)


class TestLdtBuilders:
    def test_bilevel_point_satisfies_single_level(self):
        rng = np.random.default_rng(4)
        g = GaussianSpec(np.zeros(3), np.eye(3) + 0.2 * np.ones((3, 3)))
        spec = linear_u_spec(g, 0.01, rng.normal(size=3), np.array([1.0, 0.5]))
        u = np.array([-0.7, 0.3])
        sol = ldt.solve_ldt_minimizer(g, spec.model, u, spec.z)
        for order in (1, 2):
            built = fm.build_gaussian_cc(spec, order)
            x = built.layout.pack({"u": u, "xi": sol.xi_star, "lam": [sol.lam]})
            assert eq_residual(built, x) <= 1e-8

    def test_bilevel_point_mixture(self):
        rng = np.random.default_rng(5)
        d = random_mixture(rng, 2, 3)
        spec = linear_u_spec(d, 0.01, rng.normal(size=3), np.array([1.0, 0.5]), z=8.0)
        u = np.array([-0.7, 0.3])
        sol = ldt.solve_ldt_minimizer(d, spec.model, u, spec.z)
        built = fm.build_mixture_cc_first(spec)
        x = built.layout.pack({"u": u, "xi": sol.xi_star, "eta": sol.eta_star, "lam": [sol.lam]})
        assert eq_residual(built, x) <= 1e-8

    def test_short_column_alpha_1e1(self):
        res = fm.solve_built(fm.build_gaussian_cc(sc_spec(0.1), 1))
        assert res.ok
        assert np.all(res.u >= [5.0, 15.0]) and np.all(res.u <= [15.0, 25.0])

    def test_order1_vs_order2_areas(self):
        a1 = fm.solve_built(fm.build_gaussian_cc(sc_spec(1e-2), 1))
        a2 = fm.solve_built(fm.build_gaussian_cc(sc_spec(1e-2), 2))
        assert a1.ok and a2.ok
        assert abs(a1.objective - a2.objective) <= 0.02 * a1.objective
        assert a2.diagnostics["min_eig"] > 0

    def test_mixture_first_reduces_to_gaussian(self):
        g = short_column_gaussian()
        a = fm.solve_built(fm.build_gaussian_cc(sc_spec(1e-2), 1))
        b = fm.solve_built(fm.build_mixture_cc_first(sc_spec(1e-2, MixtureSpec.from_gaussian(g))))
        assert b.ok
        assert b.objective == pytest.approx(a.objective, rel=1e-6)

    def test_mixture_second_reduces_to_gaussian(self):
        g = short_column_gaussian()
        a = fm.solve_built(fm.build_gaussian_cc(sc_spec(1e-2), 2))
        b = fm.solve_built(fm.build_mixture_cc_second(sc_spec(1e-2, MixtureSpec.from_gaussian(g))))
        assert b.ok
        assert b.objective == pytest.approx(a.objective, rel=1e-6)
        assert min(b.diagnostics["qcqp3_min_eig"]) > -1e-6

    def test_mixture_second_zero_hessian_equals_first(self):
        rng = np.random.default_rng(6)
        d = random_mixture(rng, 2, 3)
        spec = linear_u_spec(d, 1e-3, rng.normal(size=3), np.array([1.0, 0.5]), z=8.0)
        a = fm.solve_built(fm.build_mixture_cc_first(spec))
        b = fm.solve_built(fm.build_mixture_cc_second(spec))
        assert a.ok and b.ok
        assert b.objective == pytest.approx(a.objective, rel=1e-6)

    def test_short_column_mixture_feasible(self):
        from ldtcc.limit_state import short_column_mixture
        spec = sc_spec(1e-2, short_column_mixture())
        res = fm.solve_built(fm.build_mixture_cc_first(spec))
        assert res.ok
        est = mc_probability(spec.dist, spec.model, res.u, 1.0, 10**6, 17)
        assert est.passes(1e-2)

    def test_tight_alpha_tiny_box_not_optimal(self):
        model = ShortColumnModel((5.0, 5.01, 15.0, 15.01))
        try:
            res = fm.solve_built(fm.build_gaussian_cc(sc_spec(1e-8, model=model), 1),
                                 nlp.SolverOptions(max_outer=30))
        except LdtError:
            return
        assert not res.ok

    def test_log_space_constraint_finite_at_tiny_probability(self):
        from ldtcc.limit_state import short_column_mixture
        for built in (fm.build_gaussian_cc(sc_spec(1e-12), 2),
                      fm.build_mixture_cc_first(sc_spec(1e-12, short_column_mixture()))):
            blk = built.problem.ineq[0]
            x = built.x0.copy()
            x[built.layout["xi"]] *= 3.0   # push the dominating point far into the tail
            v = blk.fun(x)
            J = blk.jac(x) if blk.jac is not None else nlp._fd_jac(blk.fun, x, 1e-6)
            assert np.all(np.isfinite(v)) and np.all(np.isfinite(J))


class TestSampleBuilders:
    def test_saa_single_sample_sigmoid_limit(self):
        g = GaussianSpec(np.zeros(2), np.eye(2))
        spec = linear_u_spec(g, 0.1, np.array([1.0, 0.0]), np.array([1.0, 0.0]), z=4.0)
        built = fm.build_saa(spec, np.array([[-6.0, 0.0]]), nu=1.0, tau=200.0)
        res = fm.solve_built(built)
        assert res.ok
        p = res.parts["p"][0]
        assert p <= 1e-6
        assert spec.alpha - p == pytest.approx(spec.alpha, abs=1e-6)

    def test_saa_and_cvar_empirical_fraction(self):
        spec = sc_spec(0.1)
        X = sample(spec.dist, 200, 9)
        saa = fm.solve_built(fm.build_saa(spec, X))
        cvar = fm.solve_built(fm.build_cvar(spec, X))
        assert saa.ok and cvar.ok
        assert saa.diagnostics["sample_fraction"] <= 0.1 + 1 / 200
        assert cvar.diagnostics["sample_fraction"] <= 0.1
        # CVaR is the more conservative approximation on shared samples
        assert cvar.objective >= saa.objective - 1e-3 * saa.objective

    def test_cvar_linear_portfolio(self):
        model, g = small_portfolio()
        X = sample(g, 300, 2)
        res = fm.solve_built(fm.build_var_max(fm.var_spec(model, g, 0.05), "cvar", samples=X))
        assert res.ok
        assert res.diagnostics["sample_fraction"] <= 0.05

    def test_saa_rejects_bad_parameters(self):
        with pytest.raises(InvalidArgument):
            fm.build_saa(sc_spec(0.1), np.zeros((3, 3)), nu=0.0)
        with pytest.raises(InvalidArgument):
            fm.build_cvar(sc_spec(0.1), np.zeros((3, 2)))

    def test_make_builder_needs_samples(self):
        with pytest.raises(InvalidArgument):
            fm.make_builder("saa")
        with pytest.raises(InvalidArgument):
            fm.make_builder("scenario")


class TestVar:
    @pytest.mark.parametrize("alpha", [1e-2, 1e-4])
    def test_single_stock_closed_form(self, alpha):
        sd = 0.02
        model = PortfolioModel.from_log_returns([0.0005], [sd], 10.0)
        g = GaussianSpec(np.zeros(1), np.array([[sd**2]]))
        res = fm.solve_built(fm.build_var_max(fm.var_spec(model, g, alpha)))
        exact = math.exp(0.0005 * 10 + math.sqrt(10) * normal_cdf_inv(alpha) * sd)
        assert res.ok
        assert res.z == pytest.approx(exact, rel=1e-7)

    def test_median_at_half(self):
        model, g = small_portfolio()
        res = fm.solve_built(fm.build_var_max(fm.var_spec(model, g, 0.5)))
        assert res.ok
        assert abs(res.z - var_quantile(g, model, res.u, 0.5, 10**6, 1)) <= 1e-3

    def test_close_to_true_var(self):
        model, g = small_portfolio(4, seed=2)
        res = fm.solve_built(fm.build_var_max(fm.var_spec(model, g, 1e-3)))
        assert res.ok
        assert abs(res.u.sum() - 1) <= 1e-8 and np.all(res.u >= 0)
        assert res.z <= var_quantile(g, model, res.u, 1e-3, 10**7, 3) + 1e-3

    @pytest.mark.slow
    def test_second_order_mixture_not_worse(self):
        from ldtcc.cli import data
        prices = data.simulate_gbm(3, 800, 21, regimes=[0.9, 0.1, 2.5, -0.002])
        R = data.log_returns(prices)
        sd = R.std(axis=0, ddof=1)
        model = PortfolioModel.from_log_returns(R.mean(axis=0), sd, 10.0)
        mix = fit_em(R - R.mean(axis=0), 2, 5)
        spec = fm.var_spec(model, mix, 1e-4)
        r1 = fm.solve_built(fm.build_var_max(spec, "ldt1"))
        r2 = fm.solve_built(fm.build_var_max(spec, "ldt2"))
        assert r1.ok and r2.ok
        v1 = var_quantile(mix, model, r1.u, 1e-4, 2 * 10**6, 8)
        v2 = var_quantile(mix, model, r2.u, 1e-4, 2 * 10**6, 8)
        assert v2 >= v1 - 1e-3


class TestSweep:
    ALPHAS = [1e-1, 1e-2, 1e-3, 1e-4]

    def test_monotone_areas_and_warm_vs_cold(self):
        warm = fm.alpha_sweep(sc_spec(0.1), self.ALPHAS, "ldt1", check=False)
        cold = fm.alpha_sweep(sc_spec(0.1), self.ALPHAS, "ldt1", check=False, warm=False)
        assert all(s.status == "optimal" for s in warm + cold)
        areas = [s.result.objective for s in warm]
        assert all(b >= a - 1e-6 * a for a, b in zip(areas, areas[1:]))
        wins = sum(w.result.nlp_result.inner_iterations <= c.result.nlp_result.inner_iterations
                   for w, c in zip(warm, cold))
        assert wins >= 3
        assert [s.warm for s in warm] == [False, True, True, True]

    def test_injected_failure_continues(self):
        steps = fm.alpha_sweep(sc_spec(0.1), self.ALPHAS, "ldt1", check=False, fail_at=1)
        assert [s.status for s in steps][1] == "failed"
        assert len(steps) == 4
        assert steps[2].result is not None and not steps[2].warm
        assert steps[3].result is not None

    def test_mc_check_recorded(self):
        steps = fm.alpha_sweep(sc_spec(0.1), [1e-1, 1e-2], "ldt1", seed=3, check_N=10**5)
        for s in steps:
            assert s.check == "mc"
            assert s.mc.N == 10**5
            assert s.mc.passes(s.alpha)

    def test_ldt_cross_check_below_threshold(self):
        steps = fm.alpha_sweep(sc_spec(1e-5), [1e-6], "ldt1")
        assert steps[0].check == "ldt"
        assert steps[0].log_gap == pytest.approx(0.0, abs=1e-3)

    def test_rejects_bad_alphas(self):
        with pytest.raises(InvalidArgument):
            fm.alpha_sweep(sc_spec(0.1), [1e-2, 1e-1])
        with pytest.raises(InvalidArgument):
            fm.alpha_sweep(sc_spec(0.1), [1.5])

    def test_seeds_and_check_size(self):
        assert fm.sweep_seed(0, 1) != fm.sweep_seed(0, 2)
        assert fm.sweep_seed(5, 1) == fm.sweep_seed(5, 1)
        assert fm.mc_check_size(1e-3) == 10_000
        assert fm.mc_check_size(1e-9) == 10_000_000
