"""Shared random-instance generators for the test-suite."""
import numpy as np

from ldtcc.distributions import GaussianSpec, MixtureSpec


def random_spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    d = np.geomspace(1.0, cond, n) * rng.uniform(0.5, 2.0)
    C = (Q * d) @ Q.T
    return 0.5 * (C + C.T)


def random_gaussian(rng, n, cond=10.0):
    return GaussianSpec(rng.normal(size=n), random_spd(rng, n, cond))


def random_mixture(rng, M, n, spread=1.0, cond=5.0):
    w = rng.dirichlet(np.full(M, 3.0))
    w = w / w.sum()
    means = [spread * rng.normal(size=n) for _ in range(M)]
    covs = [random_spd(rng, n, cond) for _ in range(M)]
    return MixtureSpec.from_arrays(w, means, covs)


def brute_det_perp(H, n_hat):
    """det of H restricted to the orthogonal complement of n_hat, via an explicit basis."""
    n = H.shape[0]
    Q, _ = np.linalg.qr(np.column_stack([n_hat, np.eye(n)[:, : n - 1]]))
    B = Q[:, 1:]
    return float(np.linalg.det(B.T @ H @ B))
