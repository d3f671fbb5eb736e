"""Gaussian and Gaussian-mixture distributions.

Covers the cumulant generating function of a mixture and its derivatives,
Gaussian and mixture rate functions, sampling, EM fitting and the scalar
normal CDF helpers used throughout the package.
"""
from __future__ import annotations

import math

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import linalg, special

from .errors import InvalidArgument, NumericFailure

_SQRT2 = np.sqrt(2.0)


def _as_vector(x, n=None, name="vector"):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InvalidArgument(f"{name} must be one-dimensional, got shape {x.shape}")
    if n is not None and x.shape[0] != n:
        raise InvalidArgument(f"{name} has length {x.shape[0]}, expected {n}")
    return x


class CholeskyCache:
    """Precomputed factors of one covariance matrix.

    Holds the lower Cholesky factor ``L`` (``cov = L @ L.T``), the symmetric
    square root ``sqrt`` and helpers to apply ``L^{-1}`` and ``cov^{-1}``.
    """

    def __init__(self, cov):
        self.cov = cov
        try:
            self.L = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as exc:
            raise InvalidArgument("covariance is not positive definite") from exc
        w, V = linalg.eigh(cov)
        if w.min() <= 0:
            raise InvalidArgument("covariance is not positive definite")
        self.eigvals = w
        self.sqrt = (V * np.sqrt(w)) @ V.T
        self.sqrt = 0.5 * (self.sqrt + self.sqrt.T)
        self.logdet = 2.0 * np.sum(np.log(np.diag(self.L)))

    def solve_L(self, b):
        """Return L^{-1} b."""
        return linalg.solve_triangular(self.L, b, lower=True)

    def solve_LT(self, b):
        """Return L^{-T} b."""
        return linalg.solve_triangular(self.L, b, lower=True, trans="T")

    def solve(self, b):
        """Return cov^{-1} b."""
        return linalg.cho_solve((self.L, True), b)

    @cached_property
    def inv(self):
        return self.solve(np.eye(self.cov.shape[0]))


@dataclass(frozen=True)
class GaussianSpec:
    """Multivariate normal N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray
    _factors: CholeskyCache = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = _as_vector(self.mean, name="mean").copy()
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float)).copy()
        n = mean.shape[0]
        if n < 1:
            raise InvalidArgument("dimension must be at least 1")
        if cov.shape != (n, n):
            raise InvalidArgument(f"cov has shape {cov.shape}, expected {(n, n)}")
        scale = max(np.max(np.abs(cov)), np.finfo(float).tiny)
        if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
            raise InvalidArgument("cov is not symmetric")
        cov = 0.5 * (cov + cov.T)
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_factors", CholeskyCache(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def factors(self) -> CholeskyCache:
        return self._factors

    def whiten(self, xi):
        """Return L^{-1}(xi - mean)."""
        return self._factors.solve_L(np.asarray(xi, dtype=float) - self.mean)

    def mahalanobis(self, xi) -> float:
        return float(np.linalg.norm(self.whiten(_as_vector(xi, self.dim, "xi"))))

    def logpdf(self, X):
        X = np.atleast_2d(X)
        Z = self._factors.solve_L((X - self.mean).T)
        return -0.5 * np.sum(Z**2, axis=0) - 0.5 * self._factors.logdet - 0.5 * self.dim * np.log(2 * np.pi)


@dataclass(frozen=True)
class MixtureSpec:
    """Finite Gaussian mixture with weights summing to one."""

    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        w = _as_vector(self.weights, name="weights").copy()
        if len(comps) < 1:
            raise InvalidArgument("a mixture needs at least one component")
        if w.shape[0] != len(comps):
            raise InvalidArgument("number of weights and components differ")
        if np.any(w <= 0) or np.any(w > 1):
            raise InvalidArgument("weights must lie in (0, 1]")
        if abs(w.sum() - 1.0) > 1e-12:
            raise InvalidArgument(f"weights sum to {w.sum()!r}, not 1")
        for c in comps:
            if not isinstance(c, GaussianSpec):
                raise InvalidArgument("components must be GaussianSpec instances")
        n = comps[0].dim
        if any(c.dim != n for c in comps):
            raise InvalidArgument("components have different dimensions")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @classmethod
    def from_arrays(cls, weights, means, covs) -> "MixtureSpec":
        return cls(np.asarray(weights, float), tuple(GaussianSpec(m, c) for m, c in zip(means, covs)))

    @classmethod
    def from_gaussian(cls, g: GaussianSpec) -> "MixtureSpec":
        return cls(np.array([1.0]), (g,))

    @property
    def M(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @cached_property
    def means(self):
        return np.array([c.mean for c in self.components])

    @cached_property
    def covs(self):
        return np.array([c.cov for c in self.components])

    @cached_property
    def log_weights(self):
        return np.log(self.weights)

    @cached_property
    def mean(self):
        return self.weights @ self.means

    @cached_property
    def moment_matched(self) -> GaussianSpec:
        """Single Gaussian with the mixture's mean and covariance."""
        mu = self.mean
        D = self.means - mu
        cov = np.einsum("i,ijk->jk", self.weights, self.covs) + (D.T * self.weights) @ D
        return GaussianSpec(mu, cov)

    def logpdf(self, X):
        parts = np.array([c.logpdf(X) for c in self.components]) + self.log_weights[:, None]
        return special.logsumexp(parts, axis=0)


def as_mixture(dist) -> MixtureSpec:
    if isinstance(dist, MixtureSpec):
        return dist
    if isinstance(dist, GaussianSpec):
        return MixtureSpec.from_gaussian(dist)
    raise InvalidArgument(f"expected GaussianSpec or MixtureSpec, got {type(dist).__name__}")


# --------------------------------------------------------------------------
# cumulant generating function

def _cgf_parts(dist: MixtureSpec, eta):
    eta = _as_vector(eta, dist.dim, "eta")
    Se = dist.covs @ eta                      # Sigma_i eta, shape M x n
    expo = dist.log_weights + dist.means @ eta + 0.5 * Se @ eta
    # hot path: a 1-D max-shifted log-sum-exp avoids scipy's per-call overhead
    top = expo.max()
    e = np.exp(expo - top)
    S = top + math.log(e.sum())
    p = e / e.sum()
    return S, p, dist.means + Se


def cgf(dist: MixtureSpec, eta) -> float:
    """S(eta) = log sum_i w_i exp(eta.mu_i + eta.Sigma_i.eta / 2)."""
    return float(_cgf_parts(as_mixture(dist), eta)[0])


def cgf_grad(dist: MixtureSpec, eta):
    """Gradient of the CGF: softmax-weighted mean of mu_i + Sigma_i eta."""
    _, p, m = _cgf_parts(as_mixture(dist), eta)
    return p @ m


def cgf_hess(dist: MixtureSpec, eta):
    """Hessian of the CGF, written as a sum of PSD terms."""
    dist = as_mixture(dist)
    _, p, m = _cgf_parts(dist, eta)
    mbar = p @ m
    D = m - mbar
    H = np.einsum("i,ijk->jk", p, dist.covs) + (D.T * p) @ D
    return 0.5 * (H + H.T)


# --------------------------------------------------------------------------
# rate functions

def rate_gaussian(g: GaussianSpec, xi) -> float:
    """I(xi) = 0.5 * ||xi - mean||^2 in the cov^{-1} norm."""
    xi = _as_vector(xi, g.dim, "xi")
    z = g.whiten(xi)
    return 0.5 * float(z @ z)


def rate_mixture(dist: MixtureSpec, xi, max_iter=200, tol=1e-8):
    """Legendre transform of the mixture CGF at ``xi``.

    Damped Newton on the concave map eta -> eta.xi - S(eta), started from
    the moment-matched Gaussian dual point.

    Returns
    -------
    value : float
    eta : ndarray
        Maximizer, so that ``cgf_grad(dist, eta) == xi`` up to ``tol``.
    """
    dist = as_mixture(dist)
    xi = _as_vector(xi, dist.dim, "xi")
    mm = dist.moment_matched
    eta = mm.factors.solve(xi - mm.mean)
    stop = tol * (1.0 + np.linalg.norm(xi))

    S, p, m = _cgf_parts(dist, eta)
    r = xi - p @ m
    phi = eta @ xi - S
    for it in range(max_iter + 1):
        rn = np.linalg.norm(r)
        if rn <= stop:
            return float(phi), eta
        if it == max_iter:
            break
        H = cgf_hess(dist, eta)
        try:
            d = linalg.solve(H, r, assume_a="pos")
        except linalg.LinAlgError:
            d = r
        slope = r @ d
        t = 1.0
        while True:
            trial = eta + t * d
            S_t, p_t, m_t = _cgf_parts(dist, trial)
            r_t = xi - p_t @ m_t
            phi_t = trial @ xi - S_t
            if phi_t >= phi + 1e-4 * t * slope or np.linalg.norm(r_t) < rn:
                break
            t *= 0.5
            if t < 1e-12:
                raise NumericFailure("rate_mixture line search stalled", residual=rn, iterate=eta)
        eta, phi, r = trial, phi_t, r_t
    raise NumericFailure("rate_mixture Newton did not converge", residual=float(np.linalg.norm(r)), iterate=eta)


# --------------------------------------------------------------------------
# sampling

def _draw(dist: MixtureSpec, count, rng):
    n = dist.dim
    if dist.M == 1:
        c = dist.components[0]
        return c.mean + rng.standard_normal((count, n)) @ c.factors.L.T
    idx = rng.choice(dist.M, size=count, p=dist.weights)
    Z = rng.standard_normal((count, n))
    X = np.empty((count, n))
    for i, c in enumerate(dist.components):
        mask = idx == i
        X[mask] = c.mean + Z[mask] @ c.factors.L.T
    return X


def sample(dist, count: int, rng_seed) -> np.ndarray:
    """Draw ``count`` samples; identical seeds give identical matrices."""
    if int(count) != count or count < 1:
        raise InvalidArgument("count must be a positive integer")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return _draw(as_mixture(dist), int(count), rng)


# --------------------------------------------------------------------------
# EM fitting

def _floor_cov(C, floor):
    w, V = linalg.eigh(C)
    w = np.maximum(w, floor)
    C = (V * w) @ V.T
    return 0.5 * (C + C.T)


def _kmeanspp(X, M, rng):
    N = X.shape[0]
    centers = [X[rng.integers(N)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, M):
        total = d2.sum()
        if total <= 0:
            centers.append(X[rng.integers(N)])
        else:
            centers.append(X[rng.choice(N, p=d2 / total)])
        d2 = np.minimum(d2, np.sum((X - centers[-1]) ** 2, axis=1))
    return np.array(centers)


def _m_step(X, R, floor):
    Nk = R.sum(axis=0)
    w = Nk / Nk.sum()
    means = (R.T @ X) / Nk[:, None]
    covs = []
    for k in range(R.shape[1]):
        D = X - means[k]
        covs.append(_floor_cov((D.T * R[:, k]) @ D / Nk[k], floor))
    return w, means, np.array(covs)


def _e_step(X, w, means, covs):
    logp = np.empty((X.shape[0], len(w)))
    for k in range(len(w)):
        logp[:, k] = np.log(w[k]) + GaussianSpec(means[k], covs[k]).logpdf(X)
    ll_rows = special.logsumexp(logp, axis=1)
    return np.exp(logp - ll_rows[:, None]), float(ll_rows.sum())


def fit_em_trace(data, M: int, rng_seed, max_iter=500, rtol=1e-8):
    """EM fit that also returns the log-likelihood after every iteration."""
    X = np.asarray(data, dtype=float)
    if X.ndim != 2:
        raise InvalidArgument("data must be an N x n matrix")
    N, n = X.shape
    if M < 1:
        raise InvalidArgument("M must be at least 1")
    if N <= 10 * M * n:
        raise InvalidArgument(f"need more than {10 * M * n} rows to fit {M} components in dimension {n}")
    S = np.cov(X, rowvar=False, bias=True).reshape(n, n)
    ev = linalg.eigvalsh(S)
    if ev[-1] <= 0 or ev[0] <= 1e-12 * ev[-1]:
        raise InvalidArgument("sample covariance is rank deficient")
    floor = 1e-8 * np.trace(S) / n

    if M == 1:
        mu = X.mean(axis=0)
        C = _floor_cov(S, floor)
        spec = MixtureSpec.from_arrays([1.0], [mu], [C])
        return spec, [float(spec.logpdf(X).sum())]

    rng = np.random.default_rng(rng_seed)
    centers = _kmeanspp(X, M, rng)
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    hard = np.zeros((N, M))
    hard[np.arange(N), np.argmin(d2, axis=1)] = 1.0
    R = 0.999 * hard + 0.001 / M
    w, means, covs = _m_step(X, R, floor)

    history = []
    R, ll = _e_step(X, w, means, covs)
    history.append(ll)
    for _ in range(max_iter):
        w, means, covs = _m_step(X, R, floor)
        R, ll_new = _e_step(X, w, means, covs)
        history.append(ll_new)
        if abs(ll_new - ll) <= rtol * abs(ll):
            break
        ll = ll_new
    w = w / w.sum()
    return MixtureSpec.from_arrays(w, means, covs), history


def fit_em(data, M: int, rng_seed) -> MixtureSpec:
    """Fit an M-component Gaussian mixture by expectation-maximization.

    Seeding is k-means++ style, covariances are eigen-floored at
    ``1e-8 * trace(sample cov) / n`` and the iteration stops once the
    relative log-likelihood gain drops below 1e-8 (or after 500 steps).
    """
    return fit_em_trace(data, M, rng_seed)[0]


# --------------------------------------------------------------------------
# scalar normal helpers

def normal_cdf(x):
    """Standard normal CDF through erfc, accurate deep into the lower tail."""
    out = 0.5 * special.erfc(-np.asarray(x, dtype=float) / _SQRT2)
    return float(out) if np.ndim(out) == 0 else out


def normal_logcdf(x):
    out = special.log_ndtr(np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def normal_logpdf(x):
    return -0.5 * np.asarray(x, dtype=float) ** 2 - 0.5 * np.log(2 * np.pi)


def normal_cdf_inv(p):
    """Inverse standard normal CDF with one Newton polish step."""
    p_arr = np.asarray(p, dtype=float)
    if np.any(~(p_arr > 0)) or np.any(~(p_arr < 1)):
        raise InvalidArgument("probability must lie strictly inside (0, 1)")
    x = special.ndtri(p_arr)
    lower = p_arr < 0.5
    # polish against the tail that is represented accurately
    resid = np.where(lower, normal_cdf(x) - p_arr, (1.0 - p_arr) - normal_cdf(-x))
    x = x - resid / np.exp(normal_logpdf(x))
    return float(x) if np.ndim(x) == 0 else x
