"""Application factories: model, distribution and chance-constrained spec per config.

Seed derivation: every random input is drawn from
``SeedSequence(seed, spawn_key=(TAG,))`` with the tags below, so one
top-level seed fixes the whole run.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..distributions import GaussianSpec, MixtureSpec, fit_em, normal_cdf_inv
from ..errors import ConfigError, InvalidArgument
from ..formulations import ChanceSpec, var_spec
from ..limit_state import (AdvectionDiffusionModel, PortfolioModel, ShortColumnModel,
                           short_column_gaussian, short_column_mixture)
from ..limit_state.pde import pde_distribution
from . import data

TAG_SYNTH, TAG_FIT, TAG_ALLOC, TAG_SAMPLES, TAG_MC = 1, 2, 3, 4, 5


def derive_seed(seed, tag, *extra):
    ss = np.random.SeedSequence(seed, spawn_key=(tag,) + tuple(extra))
    return int(ss.generate_state(1)[0])


@dataclass
class Application:
    name: str
    model: object
    dist: object
    make_spec: Callable          # alpha -> ChanceSpec
    default_z: float
    fixed_u: np.ndarray           # allocation / design used by `estimate`
    var_problem: bool = False


def _portfolio_returns(cfg):
    app = cfg.app
    if "prices" in app or "csv" in cfg.distribution:
        path = cfg.resolve(app.get("prices", cfg.distribution.get("csv")))
        return data.log_returns(data.read_prices(path).prices)
    synth = app.get("synth", {})
    n = int(synth.get("n", 10))
    days = int(synth.get("days", 1000))
    regimes = synth.get("regimes")
    prices = data.simulate_gbm(n, days, derive_seed(cfg.seed, TAG_SYNTH), regimes=regimes)
    return data.log_returns(prices)


def portfolio(cfg) -> Application:
    R = _portfolio_returns(cfg)
    T = float(cfg.app.get("T", 10.0))
    mean = R.mean(axis=0)
    centered = R - mean
    std = R.std(axis=0, ddof=1)
    model = PortfolioModel.from_log_returns(mean, std, T)
    kind = cfg.distribution.get("kind", "gaussian")
    n = R.shape[1]
    if "params" in cfg.distribution:
        dist = data.read_mixture_params(cfg.resolve(cfg.distribution["params"]))
    elif kind == "gaussian":
        dist = GaussianSpec(np.zeros(n), data.returns_covariance(R))
    else:
        M = int(cfg.distribution.get("M", 2))
        dist = fit_em(centered, M, derive_seed(cfg.seed, TAG_FIT))
    if "u" in cfg.app:
        u = np.asarray(cfg.app["u"], dtype=float)
        if u.shape != (n,):
            raise ConfigError(f"app.u must have {n} entries")
    else:
        u = np.random.default_rng(derive_seed(cfg.seed, TAG_ALLOC)).uniform(0, 1, n)
        u = u / u.sum()

    def make_spec(alpha):
        return var_spec(model, dist, alpha, name="portfolio")

    return Application("portfolio", model, dist, make_spec, 0.85, u, var_problem=True)


def short_column(cfg) -> Application:
    bounds = tuple(cfg.app.get("bounds", (5.0, 15.0, 15.0, 25.0)))
    model = ShortColumnModel(bounds)
    kind = cfg.distribution.get("kind", "gaussian")
    if "params" in cfg.distribution:
        dist = data.read_mixture_params(cfg.resolve(cfg.distribution["params"]))
    elif kind == "gaussian":
        dist = short_column_gaussian()
    elif kind == "mixture":
        dist = short_column_mixture()
    else:
        raise ConfigError("short_column supports distribution kinds gaussian and mixture")
    z = float(cfg.z[0]) if cfg.z else 1.0

    def make_spec(alpha, z=z):
        return ChanceSpec(model=model, dist=dist, alpha=alpha, z=z, objective=_area, objective_grad=_area_grad,
                          lower=model.lower, upper=model.upper, name="short_column")

    u = np.asarray(cfg.app.get("u", 0.5 * (model.lower + model.upper)), dtype=float)
    return Application("short_column", model, dist, make_spec, 1.0, u)


def _area(u):
    return float(u[0] * u[1])


def _area_grad(u):
    return np.array([u[1], u[0]])


def pde_start(model, dist: GaussianSpec, z, alpha, margin=1.25):
    """Constant control whose linearized exceedance probability is below alpha.

    The window average responds one-for-one to a uniform shift of u, so the
    offset is read off the affine parts at the mean.
    """
    a, b = model.affine_parts(dist.mean)
    g = model.grad_xi(np.zeros(model.dim_u), dist.mean)
    s = float(np.sqrt(g @ dist.cov @ g))
    beta = max(-normal_cdf_inv(alpha), 0.0)
    c = (z - b - margin * beta * s - 0.05) / a.sum()
    return np.full(model.dim_u, c)


def pde(cfg) -> Application:
    m = int(cfg.app.get("m", 15))
    model = AdvectionDiffusionModel(m=m, eps0=float(cfg.app.get("eps0", 1e-4)))
    if cfg.distribution.get("kind", "gaussian") != "gaussian" and "params" not in cfg.distribution:
        raise ConfigError("pde supports a Gaussian distribution or an explicit params file")
    dist = (data.read_mixture_params(cfg.resolve(cfg.distribution["params"]))
            if "params" in cfg.distribution else pde_distribution())
    z = float(cfg.z[0]) if cfg.z else 1.0
    gauss = dist if isinstance(dist, GaussianSpec) else dist.moment_matched

    def make_spec(alpha, z=z):
        return ChanceSpec(model=model, dist=dist, alpha=alpha, z=z, objective=model.boundary_energy,
                          objective_grad=model.boundary_energy_grad, u0=pde_start(model, gauss, z, alpha),
                          name="pde")

    u = np.asarray(cfg.app.get("u", pde_start(model, gauss, z, 1e-2)), dtype=float)
    return Application("pde", model, dist, make_spec, 1.0, u)


FACTORIES = {"portfolio": portfolio, "short_column": short_column, "pde": pde}


def build_application(cfg) -> Application:
    try:
        return FACTORIES[cfg.application](cfg)
    except (InvalidArgument, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot set up application {cfg.application!r}: {exc}") from exc
