import math

import mpmath
import numpy as np
import pytest

from ldtcc.distributions import (GaussianSpec, MixtureSpec, cgf, cgf_grad, fit_em, fit_em_trace, normal_cdf,
                                 normal_cdf_inv, rate_gaussian, rate_mixture, sample)
from ldtcc.errors import InvalidArgument

from .helpers import random_mixture, random_spd

# frozen from plain-float evaluations of the defining formulas
CGF_TWO_COMPONENT = 1.1201145069582774         # log(0.5 e^0.5 + 0.5 e^1.5)
CGF_GRAD_TWO_COMPONENT = 1.7310585786300048    # softmax-weighted mean of 1 and 2


def std_normal(n=2):
    return GaussianSpec(np.zeros(n), np.eye(n))


def two_comp():
    return MixtureSpec.from_arrays([0.5, 0.5], [np.zeros(2), np.array([1.0, 0.0])], [np.eye(2), np.eye(2)])


class TestSpecs:
    def test_gaussian_rejects_asymmetric(self):
        with pytest.raises(InvalidArgument):
            GaussianSpec(np.zeros(2), np.array([[1.0, 0.1], [0.0, 1.0]]))

    def test_gaussian_rejects_indefinite(self):
        with pytest.raises(InvalidArgument):
            GaussianSpec(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_mixture_weights_must_sum_to_one(self):
        with pytest.raises(InvalidArgument):
            MixtureSpec.from_arrays([0.5, 0.6], [np.zeros(1), np.ones(1)], [np.eye(1), np.eye(1)])

    def test_mixture_rejects_nonpositive_weight(self):
        with pytest.raises(InvalidArgument):
            MixtureSpec.from_arrays([1.0, 0.0], [np.zeros(1), np.ones(1)], [np.eye(1), np.eye(1)])

    def test_cholesky_cache_reconstructs(self):
        rng = np.random.default_rng(0)
        C = random_spd(rng, 5)
        f = GaussianSpec(np.zeros(5), C).factors
        assert np.linalg.norm(f.L @ f.L.T - C) <= 1e-10 * np.linalg.norm(C)
        assert np.linalg.norm(f.sqrt @ f.sqrt - C) <= 1e-10 * np.linalg.norm(C)
        assert np.allclose(f.sqrt, f.sqrt.T)


class TestCgf:
    def test_standard_normal(self):
        assert cgf(MixtureSpec.from_gaussian(std_normal()), [1.0, 1.0]) == pytest.approx(1.0, rel=1e-14)

    def test_shifted_mean(self):
        g = GaussianSpec(np.array([2.0, 0.0]), np.eye(2))
        assert cgf(g, [1.0, 0.0]) == pytest.approx(2.5, rel=1e-14)

    def test_two_components(self):
        assert cgf(two_comp(), [1.0, 0.0]) == pytest.approx(CGF_TWO_COMPONENT, rel=1e-14)

    def test_no_overflow_large_eta(self):
        v = cgf(two_comp(), [1e3, -1e3])
        assert math.isfinite(v)
        # dominated by the larger exponent: log(0.5) + 1e3 + 1e6
        assert v == pytest.approx(math.log(0.5) + 1e3 + 1e6, rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgument):
            cgf(two_comp(), [1.0, 0.0, 0.0])

    def test_grad_single(self):
        g = GaussianSpec(np.array([2.0, 0.0]), np.eye(2))
        assert np.allclose(cgf_grad(g, [1.0, 0.0]), [3.0, 0.0], atol=1e-14)

    def test_grad_at_origin_is_mean(self):
        g = GaussianSpec(np.array([0.3, -1.0]), np.diag([2.0, 0.5]))
        assert np.allclose(cgf_grad(g, np.zeros(2)), g.mean, atol=1e-14)

    def test_grad_two_components(self):
        g = cgf_grad(two_comp(), [1.0, 0.0])
        assert g[0] == pytest.approx(CGF_GRAD_TWO_COMPONENT, rel=1e-13)
        assert g[1] == pytest.approx(0.0, abs=1e-14)

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(1)
        d = random_mixture(rng, 3, 3)
        eta = rng.normal(size=3)
        h = 1e-5
        fd = np.array([(cgf(d, eta + h * e) - cgf(d, eta - h * e)) / (2 * h) for e in np.eye(3)])
        g = cgf_grad(d, eta)
        assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(g)


class TestRate:
    def test_at_mean(self):
        g = GaussianSpec(np.array([1.0, 2.0]), np.eye(2))
        assert rate_gaussian(g, g.mean) == 0.0

    def test_standard(self):
        assert rate_gaussian(std_normal(), [3.0, 4.0]) == pytest.approx(12.5, rel=1e-14)

    def test_scaled(self):
        g = GaussianSpec(np.array([1.0, 1.0]), np.diag([4.0, 1.0]))
        assert rate_gaussian(g, [3.0, 1.0]) == pytest.approx(0.5, rel=1e-14)

    def test_mixture_single_component_equals_gaussian(self):
        rng = np.random.default_rng(2)
        g = GaussianSpec(rng.normal(size=3), random_spd(rng, 3))
        xi = rng.normal(size=3) * 2
        v, eta = rate_mixture(MixtureSpec.from_gaussian(g), xi)
        assert v == pytest.approx(rate_gaussian(g, xi), rel=1e-10)
        assert np.allclose(eta, g.factors.solve(xi - g.mean), atol=1e-8)

    def test_mixture_zero_at_mean(self):
        d = two_comp()
        v, eta = rate_mixture(d, d.mean)
        assert v == pytest.approx(0.0, abs=1e-14)
        assert np.allclose(eta, 0.0, atol=1e-12)

    def test_min_component_bound_fails_at_mixture_mean(self):
        # the mixture mean has zero rate, yet every component rate there is positive
        d = MixtureSpec.from_arrays([0.5, 0.5], [np.zeros(2), np.array([4.0, 0.0])], [np.eye(2), np.eye(2)])
        v, _ = rate_mixture(d, d.mean)
        assert v == pytest.approx(0.0, abs=1e-14)
        assert min(rate_gaussian(c, d.mean) for c in d.components) == pytest.approx(2.0)

    def test_dominates_convex_envelope_of_min_component(self):
        # any eta gives eta.xi - max_j S_j(eta) <= conv(min_j I_j)(xi) <= I(xi)
        from scipy.optimize import minimize
        rng = np.random.default_rng(3)
        d = random_mixture(rng, 2, 3)

        def env_lower(xi):
            def neg(eta):
                return -(eta @ xi - max(cgf(c, eta) for c in d.components))
            x0 = d.components[0].factors.solve(xi - d.components[0].mean)
            return -minimize(neg, x0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12,
                                                                   "maxiter": 4000}).fun
        for _ in range(20):
            xi = d.mean + 3 * rng.normal(size=3)
            v, _ = rate_mixture(d, xi)
            assert v >= env_lower(xi) - 1e-8

    def test_upper_bound_by_weighted_components(self):
        # S >= log w_j + S_j, hence I <= I_j - log w_j for every j
        rng = np.random.default_rng(8)
        d = random_mixture(rng, 3, 2)
        for _ in range(20):
            xi = d.mean + 3 * rng.normal(size=2)
            v, _ = rate_mixture(d, xi)
            ub = min(rate_gaussian(c, xi) - math.log(w) for w, c in zip(d.weights, d.components))
            assert v <= ub + 1e-10

    def test_mixture_stationarity_at_return(self):
        rng = np.random.default_rng(4)
        d = random_mixture(rng, 3, 2)
        xi = d.mean + np.array([4.0, -3.0])
        v, eta = rate_mixture(d, xi)
        assert np.linalg.norm(xi - cgf_grad(d, eta)) <= 1e-8 * (1 + np.linalg.norm(xi))
        assert eta @ xi - cgf(d, eta) == pytest.approx(v, abs=1e-10)


class TestSample:
    def test_mean_clt(self):
        X = sample(std_normal(3), 10**6, 11)
        assert np.linalg.norm(X.mean(axis=0)) <= 5e-3

    def test_determinism(self):
        d = two_comp()
        assert np.array_equal(sample(d, 1000, 5), sample(d, 1000, 5))
        assert not np.array_equal(sample(d, 1000, 5), sample(d, 1000, 6))

    def test_component_frequencies(self):
        d = MixtureSpec.from_arrays([0.5, 0.5], [np.array([-50.0]), np.array([50.0])], [np.eye(1), np.eye(1)])
        N = 10**5
        frac = np.mean(sample(d, N, 3)[:, 0] > 0)
        assert abs(frac - 0.5) <= 5 * math.sqrt(0.25 / N)

    def test_mixture_mean_within_5se(self):
        rng = np.random.default_rng(9)
        d = random_mixture(rng, 2, 2)
        N = 10**6
        X = sample(d, N, 12)
        # per-coordinate standard error from the mixture covariance
        se = np.sqrt(np.diag(d.moment_matched.cov) / N)
        assert np.all(np.abs(X.mean(axis=0) - d.mean) <= 5 * se)

    def test_invalid_count(self):
        with pytest.raises(InvalidArgument):
            sample(std_normal(), 0, 1)


class TestFitEm:
    def test_single_component_is_sample_moments(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(500, 3)) @ np.array([[1, 0, 0], [0.5, 1, 0], [0, 0.2, 2.0]])
        d = fit_em(X, 1, 0)
        assert np.allclose(d.components[0].mean, X.mean(axis=0), atol=1e-12)
        assert np.allclose(d.components[0].cov, np.cov(X, rowvar=False, bias=True), atol=1e-12)

    def test_recovers_separated_means(self):
        truth = MixtureSpec.from_arrays([0.4, 0.6], [np.zeros(2), np.array([10.0, 0.0])], [np.eye(2), np.eye(2)])
        X = sample(truth, 10**4, 21)
        d = fit_em(X, 2, 4)
        means = sorted(d.means.tolist())
        assert np.allclose(means[0], [0.0, 0.0], atol=0.1)
        assert np.allclose(means[1], [10.0, 0.0], atol=0.1)

    def test_loglik_monotone(self):
        rng = np.random.default_rng(5)
        X = sample(random_mixture(rng, 3, 2, spread=2.0), 3000, 7)
        _, hist = fit_em_trace(X, 3, 1)
        assert len(hist) > 2
        assert np.all(np.diff(hist) >= -1e-8 * np.abs(np.array(hist[1:])))

    def test_covariance_floor(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(2000, 2))
        d = fit_em(X, 2, 0)
        floor = 1e-8 * np.trace(np.cov(X, rowvar=False, bias=True)) / 2
        for c in d.components:
            assert np.linalg.eigvalsh(c.cov).min() >= floor * (1 - 1e-12)

    def test_rank_deficient(self):
        x = np.random.default_rng(0).normal(size=200)
        with pytest.raises(InvalidArgument):
            fit_em(np.column_stack([x, 2 * x]), 1, 0)

    def test_too_few_rows(self):
        with pytest.raises(InvalidArgument):
            fit_em(np.random.default_rng(0).normal(size=(20, 2)), 1, 0)


class TestNormal:
    def test_half(self):
        assert normal_cdf(0.0) == 0.5

    @pytest.mark.parametrize("x", [0.5, 1.0, 3.0, 6.0])
    def test_symmetry(self, x):
        assert normal_cdf(-x) + normal_cdf(x) == pytest.approx(1.0, abs=1e-15)

    def test_phi_minus_three(self):
        assert normal_cdf(-3.0) == pytest.approx(1.349898031630094e-3, rel=1e-12)

    @pytest.mark.parametrize("x", [-8.0, -5.0, -1.5, 0.3, 2.0, 7.9])
    def test_absolute_accuracy(self, x):
        assert abs(normal_cdf(x) - float(mpmath.ncdf(x))) <= 1e-14

    @pytest.mark.parametrize("x", [-10.0, -20.0, -30.0, -37.0])
    def test_far_tail_relative(self, x):
        ref = float(mpmath.ncdf(x))
        assert abs(normal_cdf(x) - ref) <= 1e-10 * ref

    @pytest.mark.parametrize("p", [1e-300, 1e-12, 1e-4, 0.3, 0.5, 0.9, 1 - 1e-10])
    def test_inverse_round_trip(self, p):
        x = normal_cdf_inv(p)
        back = normal_cdf(x) if p < 0.5 else 1.0 - normal_cdf(-x)
        assert back == pytest.approx(p, rel=1e-12)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
    def test_inverse_domain(self, p):
        with pytest.raises(InvalidArgument):
            normal_cdf_inv(p)

    def test_monotone_grid(self):
        # above x ~ 8 the CDF is within one ulp of 1, so the grid stops short of that
        v = normal_cdf(np.linspace(-37, 6, 10**4))
        assert np.all(np.diff(v) > 0)
