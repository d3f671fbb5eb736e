"""Monte Carlo reference estimates.

Samples are generated in fixed-size chunks; chunk k draws from the stream
``SeedSequence(seed, spawn_key=(k,))``.  Hit counts are summed, so the
result depends only on (seed, N), never on how chunks are scheduled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .distributions import as_mixture, sample
from .errors import InvalidArgument, NumericFailure

CHUNK = 1 << 16


@dataclass(frozen=True)
class McEstimate:
    p_hat: float
    N: int
    standard_error: float
    seed: int
    hit_count: int

    @classmethod
    def from_counts(cls, hits, N, seed):
        p = hits / N
        return cls(p_hat=p, N=int(N), standard_error=math.sqrt(p * (1 - p) / N), seed=seed, hit_count=int(hits))

    def passes(self, alpha, k=3.0) -> bool:
        """Feasibility gate p_hat <= alpha + k * SE."""
        return self.p_hat <= alpha + k * self.standard_error


def chunk_rng(seed, k):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))


def _chunks(N, chunk):
    k = 0
    done = 0
    while done < N:
        size = min(chunk, N - done)
        yield k, size
        k += 1
        done += size


def _budget_check(model, N, max_evaluations):
    cap = max_evaluations if max_evaluations is not None else getattr(model, "mc_budget", None)
    if cap is not None and N > cap:
        raise InvalidArgument(f"N = {N} exceeds the evaluation budget of {cap} for this model")


def mc_probability(dist, model, u, z, N, seed, max_evaluations=None) -> McEstimate:
    """Estimate P(F(u, xi) >= z) from N samples."""
    if int(N) != N or N < 1:
        raise InvalidArgument("N must be a positive integer")
    N = int(N)
    _budget_check(model, N, max_evaluations)
    dist = as_mixture(dist)
    u = np.asarray(u, dtype=float)
    hits = 0
    done = 0
    for k, size in _chunks(N, CHUNK):
        X = sample(dist, size, chunk_rng(seed, k))
        try:
            vals = model.eval_batch(u, X)
        except Exception as exc:
            raise NumericFailure(f"model evaluation failed in chunk {k}",
                                 diagnostics={"hits": hits, "evaluated": done}) from exc
        hits += int(np.count_nonzero(vals >= z))
        done += size
    return McEstimate.from_counts(hits, N, seed)


def log_error(estimate_value, reference: McEstimate) -> float:
    """log10(estimate) - log10(reference p_hat); positive means over-estimation.

    A reference with no hits yields the ``-inf`` sentinel.
    """
    if not estimate_value > 0:
        raise InvalidArgument("estimate must be positive")
    if reference.hit_count == 0:
        return -math.inf
    return math.log10(estimate_value) - math.log10(reference.p_hat)


def mc_log_error(mc: McEstimate, reference: McEstimate) -> float:
    """log10 of an MC estimate relative to a reference; ``-inf`` when mc saw no hits."""
    if mc.hit_count == 0:
        return -math.inf
    return log_error(mc.p_hat, reference) if reference.hit_count else math.inf


def sample_returns(dist, model, u, N, seed):
    """Total portfolio returns -F(u, xi) for N samples, chunked like mc_probability."""
    dist = as_mixture(dist)
    u = np.asarray(u, dtype=float)
    out = np.empty(int(N))
    for k, size in _chunks(int(N), CHUNK):
        X = sample(dist, size, chunk_rng(seed, k))
        start = k * CHUNK
        out[start:start + size] = -model.eval_batch(u, X)
    return out


def var_quantile(dist, model, u, alpha, N, seed) -> float:
    """Empirical alpha-quantile of the total return (order statistic ceil(alpha N))."""
    if not 0 < alpha < 1:
        raise InvalidArgument("alpha must lie in (0, 1)")
    if N * alpha < 100:
        raise InvalidArgument(f"N * alpha = {N * alpha:g} < 100; increase N to at least {math.ceil(100 / alpha)}")
    R = sample_returns(dist, model, u, N, seed)
    k = max(math.ceil(alpha * N) - 1, 0)
    return float(np.partition(R, k)[k])
