"""Price files, synthetic price generation and mixture parameter files.

Price CSV: header ``date,SYM1,SYM2,...`` followed by one row per day.
Mixture parameter file (plain text, ``#`` starts a comment)::

    n M
    weight_1
    mean row (n numbers)
    n covariance rows
    ...repeated for each component
"""
from __future__ import annotations

import csv
import datetime as _dt
import math
from dataclasses import dataclass

import numpy as np

from ..distributions import MixtureSpec
from ..errors import InvalidArgument, ParseError


@dataclass
class PriceData:
    symbols: list
    dates: list
    prices: np.ndarray


def read_prices(csv_path) -> PriceData:
    """Parse a price CSV; row numbers in errors count the header as row 1."""
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", row=1)
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0].lower() != "date":
        raise ParseError("header must be 'date,SYM1,SYM2,...'", row=1)
    symbols = header[1:]
    dates, prices = [], []
    for k, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(row)}", row=k)
        vals = []
        for sym, cell in zip(symbols, row[1:]):
            cell = cell.strip()
            if cell == "":
                raise ParseError(f"missing price for {sym}", row=k)
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"price {cell!r} for {sym} is not a number", row=k) from None
            if not (v > 0 and math.isfinite(v)):
                raise ParseError(f"price for {sym} must be positive, got {cell}", row=k)
            vals.append(v)
        dates.append(row[0].strip())
        prices.append(vals)
    if len(prices) < 2:
        raise ParseError(f"need at least 2 data rows, found {len(prices)}", row=len(rows))
    return PriceData(symbols, dates, np.array(prices))


def log_returns(prices):
    P = np.asarray(prices, dtype=float)
    return np.log(P[1:] / P[:-1])


def ingest_prices(csv_path):
    """(theta, sigma, returns) from a price CSV.

    ``returns`` holds daily log-ratios; their mean estimates theta - sigma^2/2
    and their standard deviation estimates sigma.
    """
    R = log_returns(read_prices(csv_path).prices)
    sigma = R.std(axis=0, ddof=1) if R.shape[0] > 1 else np.zeros(R.shape[1])
    theta = R.mean(axis=0) + 0.5 * sigma**2
    return theta, sigma, R


def returns_covariance(R):
    """Unbiased sample covariance of the return rows."""
    R = np.atleast_2d(R)
    return np.atleast_2d(np.cov(R, rowvar=False, ddof=1))


# -- synthetic prices -------------------------------------------------------

def synthetic_parameters(n, seed):
    """Drifts, volatilities and a correlation matrix for n synthetic stocks."""
    rng = np.random.default_rng(seed)
    mu = rng.uniform(-2e-4, 8e-4, n)               # daily log-drift
    vol = rng.uniform(0.008, 0.02, n)
    B = rng.normal(size=(n, 2)) * np.array([0.6, 0.3])
    C = B @ B.T + np.eye(n) * 0.5
    d = np.sqrt(np.diag(C))
    return mu, vol, C / np.outer(d, d)


def simulate_gbm(n, days, seed, mu=None, vol=None, corr=None, regimes=None, start=100.0):
    """Daily prices from a correlated geometric Brownian motion.

    ``regimes`` = (p_stay_calm, p_stay_turbulent, vol_scale, drift_shift)
    switches a Markov chain between a calm and a turbulent state; the
    turbulent state scales volatility and shifts the daily log-drift, which
    makes the returns a genuine mixture.
    """
    if days < 3:
        raise InvalidArgument("need at least 3 days")
    d_mu, d_vol, d_corr = synthetic_parameters(n, seed)
    mu = d_mu if mu is None else np.asarray(mu, dtype=float)
    vol = d_vol if vol is None else np.asarray(vol, dtype=float)
    corr = d_corr if corr is None else np.asarray(corr, dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    L = np.linalg.cholesky(corr)
    Z = rng.standard_normal((days - 1, n)) @ L.T
    scale = np.ones(days - 1)
    shift = np.zeros(days - 1)
    if regimes is not None:
        p_calm, p_turb, vscale, dshift = regimes
        state = 0
        U = rng.random(days - 1)
        for k in range(days - 1):
            stay = p_calm if state == 0 else p_turb
            if U[k] > stay:
                state = 1 - state
            if state:
                scale[k], shift[k] = vscale, dshift
    R = mu + shift[:, None] + (scale[:, None] * vol) * Z
    logp = np.vstack([np.zeros(n), np.cumsum(R, axis=0)])
    return start * np.exp(logp)


def write_prices(path, prices, symbols=None, start_date="2020-01-01"):
    prices = np.asarray(prices, dtype=float)
    symbols = symbols or [f"S{i + 1:02d}" for i in range(prices.shape[1])]
    day = _dt.date.fromisoformat(start_date)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date"] + list(symbols))
        for k, row in enumerate(prices):
            w.writerow([(day + _dt.timedelta(days=k)).isoformat()] + [repr(float(v)) for v in row])


# -- mixture parameter files -------------------------------------------------

def write_mixture_params(path, dist: MixtureSpec):
    lines = [f"{dist.dim} {dist.M}"]
    for w, c in zip(dist.weights, dist.components):
        lines.append(repr(float(w)))
        lines.append(" ".join(repr(float(v)) for v in c.mean))
        lines.extend(" ".join(repr(float(v)) for v in row) for row in c.cov)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mixture_params(path) -> MixtureSpec:
    with open(path) as fh:
        raw = [(k, ln.split("#", 1)[0].split()) for k, ln in enumerate(fh, start=1)]
    rows = [(k, t) for k, t in raw if t]
    if not rows:
        raise ParseError("empty parameter file", row=1)

    def nums(entry, count):
        k, toks = entry
        if len(toks) != count:
            raise ParseError(f"expected {count} numbers, found {len(toks)}", row=k)
        try:
            return [float(t) for t in toks]
        except ValueError:
            raise ParseError("non-numeric entry", row=k) from None

    n, M = (int(v) for v in nums(rows[0], 2))
    need = 1 + M * (2 + n)
    if len(rows) != need:
        raise ParseError(f"expected {need} non-empty lines for n={n}, M={M}, found {len(rows)}",
                         row=rows[-1][0])
    weights, means, covs = [], [], []
    pos = 1
    for _ in range(M):
        weights.append(nums(rows[pos], 1)[0])
        means.append(nums(rows[pos + 1], n))
        covs.append([nums(rows[pos + 2 + r], n) for r in range(n)])
        pos += 2 + n
    return MixtureSpec.from_arrays(weights, means, covs)
