"""Experiment execution and reporting.

Every run writes ``records.csv`` (one RunRecord per row, columns in
``RECORD_COLUMNS`` order) and ``summary.txt``.  Optimization runs add
``fig_objective.csv`` and ``fig_log_gap.csv`` (plus ``fig_time.csv`` when
timing is on); estimation runs add ``table_estimate.csv``.

Floats are written with ``repr`` so a rerun with equal inputs is
byte-identical; missing values are empty and infinities are ``inf``/``-inf``.
Wall-clock times are left empty unless timing is enabled, since they would
otherwise make records.csv differ from run to run.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, fields

import numpy as np

from .. import ldt, nlp
from ..distributions import GaussianSpec, as_mixture, sample
from ..errors import ConfigError, CurvatureFailure, InvalidArgument, LdtError
from ..formulations import (alpha_sweep, check_feasibility, make_builder, solve_built, sweep_seed)
from ..mc import McEstimate, log_error, mc_log_error, mc_probability
from .apps import TAG_MC, TAG_SAMPLES, Application, build_application, derive_seed

log = logging.getLogger(__name__)


@dataclass
class RunRecord:
    application: str = ""
    method: str = ""
    alpha: float = None
    z: float = None
    objective: float = None
    log10_probability: float = None
    probability: float = None
    check: str = ""
    check_N: int = None
    check_p_hat: float = None
    check_se: float = None
    log10_gap: float = None
    log10_error: float = None
    feasible: bool = None
    status: str = ""
    iterations: int = None
    inner_iterations: int = None
    stationarity: float = None
    feasibility: float = None
    correction: float = None
    curvature_ok: bool = None
    min_eig: float = None
    warm_start: bool = None
    seed: int = None
    wall_time_s: float = None
    u: str = ""
    message: str = ""


RECORD_COLUMNS = [f.name for f in fields(RunRecord)]
_TYPES = {f.name: f.type for f in fields(RunRecord)}


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    # the csv module cannot write NUL; drop it from free-form text
    return str(v).replace("\0", "")


def _parse(name, text):
    if text == "":
        return "" if _TYPES[name] == "str" else None
    t = _TYPES[name]
    if t == "float":
        return float(text)
    if t == "int":
        return int(text)
    if t == "bool":
        return text == "true"
    return text


def format_vector(u):
    return " ".join(repr(float(v)) for v in np.asarray(u).ravel())


def write_records(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in RECORD_COLUMNS])


def read_records(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != RECORD_COLUMNS:
        raise ValueError("records file has an unexpected header")
    return [RunRecord(**{c: _parse(c, v) for c, v in zip(RECORD_COLUMNS, row)}) for row in rows[1:]]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------------------
# helpers

def ldt_dist(dist):
    """Gaussian path for single-component inputs, mixture path otherwise."""
    mix = as_mixture(dist)
    return mix.components[0] if mix.M == 1 else mix


def solver_options(cfg):
    try:
        return nlp.SolverOptions(**cfg.solver)
    except (TypeError, InvalidArgument) as exc:
        raise ConfigError(f"invalid solver options: {exc}") from None


def _ntag(N):
    e = math.log10(N)
    return f"1e{int(round(e))}" if abs(e - round(e)) < 1e-12 else str(int(N))


def _threshold(app: Application, z):
    return -z if app.var_problem else z


def _period_alpha(cfg):
    if not cfg.alpha:
        raise ConfigError("this command needs at least one alpha")
    return cfg.alpha


def _mp(cfg, key, default):
    return cfg.method_params.get(key, default)


def _result_record(app, method, cfg, res, step_warm=None, check=None, wall=None, message=""):
    d = res.diagnostics
    me = d.get("min_eig")
    q3 = d.get("qcqp3_min_eig")
    if q3:
        me = min(q3)
    rec = RunRecord(application=app.name, method=method, alpha=res.alpha, z=res.z, objective=res.objective,
                    log10_probability=(res.log_probability / math.log(10)
                                       if res.log_probability is not None and np.isfinite(res.log_probability)
                                       else (-math.inf if res.log_probability == -math.inf else None)),
                    status=res.status, iterations=res.nlp_result.iterations,
                    inner_iterations=res.nlp_result.inner_iterations, stationarity=res.nlp_result.stationarity,
                    feasibility=res.nlp_result.feasibility, correction=d.get("correction"),
                    min_eig=me, curvature_ok=(None if me is None else bool(me > -1e-6)),
                    warm_start=step_warm, seed=cfg.seed, u=format_vector(res.u),
                    message="; ".join(d.get("warnings", [])) or message)
    if rec.log10_probability is not None and np.isfinite(rec.log10_probability):
        rec.probability = 10.0 ** rec.log10_probability
    if check is not None:
        est, kind, gap = check
        rec.check = kind
        rec.log10_gap = gap
        if isinstance(est, McEstimate):
            rec.check_N, rec.check_p_hat, rec.check_se = est.N, est.p_hat, est.standard_error
            rec.feasible = bool(est.passes(res.alpha))
        else:
            rec.check_p_hat = est.value
            rec.feasible = bool(est.log_value <= math.log(res.alpha) + 1e-6)
    if cfg.timing and wall is not None:
        rec.wall_time_s = wall
    return rec


# ---------------------------------------------------------------------------
# modes

def run_estimate(cfg, app: Application):
    """Probabilities at the fixed decision over the z grid."""
    zs = cfg.z or [app.default_z]
    mc_Ns = [int(n) for n in _mp(cfg, "mc_N", [10_000, 100_000])]
    true_N = int(_mp(cfg, "mc_true_N", 10_000_000))
    dist = ldt_dist(app.dist)
    u = app.fixed_u
    records, table = [], []
    for zi, z in enumerate(zs):
        thr = _threshold(app, z)
        ref = None
        mc_runs = []
        if "mc" in cfg.methods:
            t0 = time.perf_counter()
            try:
                ref = mc_probability(app.dist, app.model, u, thr, true_N, derive_seed(cfg.seed, TAG_MC, zi, 0))
                for j, N in enumerate(mc_Ns, start=1):
                    mc_runs.append(mc_probability(app.dist, app.model, u, thr, N,
                                                  derive_seed(cfg.seed, TAG_MC, zi, j)))
            except (InvalidArgument, LdtError) as exc:
                records.append(RunRecord(application=app.name, method="mc", z=z, status="failed", seed=cfg.seed,
                                         u=format_vector(u), message=str(exc)))
                ref, mc_runs = None, []
            wall = time.perf_counter() - t0
            for est in ([ref] if ref else []) + mc_runs:
                err = (math.nan if ref is None or est is ref else mc_log_error(est, ref))
                records.append(RunRecord(application=app.name, method="mc", z=z, probability=est.p_hat,
                                         log10_probability=(math.log10(est.p_hat) if est.hit_count else -math.inf),
                                         check="mc", check_N=est.N, check_p_hat=est.p_hat,
                                         check_se=est.standard_error,
                                         log10_error=None if est is ref else err, status="ok", seed=cfg.seed,
                                         wall_time_s=wall if cfg.timing else None, u=format_vector(u),
                                         message="reference" if est is ref else ""))
        row = {"z": z, "P_true": ref.p_hat if ref else None}
        for order in (1, 2):
            name = f"ldt{order}"
            if name not in cfg.methods:
                continue
            t0 = time.perf_counter()
            rec = RunRecord(application=app.name, method=name, z=z, seed=cfg.seed, u=format_vector(u))
            try:
                est, sol = ldt.estimate(dist, app.model, u, thr, order)
                rec.probability = est.value
                rec.log10_probability = est.log_value / math.log(10)
                rec.correction = est.correction
                rec.curvature_ok = est.curvature_ok
                mins = [c.min_eig for c in est.components if np.isfinite(c.min_eig)]
                rec.min_eig = min(mins) if mins else None
                rec.stationarity = sol.kkt_residual
                rec.status = "ok"
                if ref is not None:
                    rec.log10_error = log_error(est.value, ref) if est.value > 0 else None
                row[f"P{order}"] = est.value
                row[f"eps{order}"] = rec.log10_error
            except CurvatureFailure as exc:
                rec.status, rec.message = "curvature-failure", str(exc)
            except LdtError as exc:
                rec.status, rec.message = "failed", str(exc)
            if cfg.timing:
                rec.wall_time_s = time.perf_counter() - t0
            records.append(rec)
        for N, est in zip(mc_Ns, mc_runs):
            row[f"P_MC_{_ntag(N)}"] = est.p_hat
            row[f"eps_MC_{_ntag(N)}"] = mc_log_error(est, ref) if ref else None
        table.append(row)
    header = ["z", "P_true", "P1", "P2"] + [f"P_MC_{_ntag(N)}" for N in mc_Ns] + ["eps1", "eps2"] + \
             [f"eps_MC_{_ntag(N)}" for N in mc_Ns]
    return records, {"table_estimate.csv": (header, [[r.get(h) for h in header] for r in table])}


def _samples(cfg, app):
    N = int(_mp(cfg, "N", 1000))
    return sample(app.dist, N, derive_seed(cfg.seed, TAG_SAMPLES))


def _builder(cfg, app, method):
    if method == "mc":
        raise ConfigError("'mc' is an estimation method; it cannot drive an optimization")
    samples = _samples(cfg, app) if method in ("saa", "cvar") else None
    return make_builder(method, samples, float(_mp(cfg, "nu", 200.0)), float(_mp(cfg, "tau", 200.0)))


def _check_kwargs(cfg):
    return {"cap": int(_mp(cfg, "mc_check_cap", 10_000_000)), "N": _mp(cfg, "mc_check_N", None)}


def run_optimize(cfg, app: Application):
    """One cold-started solve per (method, alpha)."""
    alphas = _period_alpha(cfg)
    opts = solver_options(cfg)
    base = derive_seed(cfg.seed, TAG_MC)
    kw = _check_kwargs(cfg)
    records = []
    for method in cfg.methods:
        build = _builder(cfg, app, method)
        for k, a in enumerate(alphas):
            t0 = time.perf_counter()
            try:
                spec = app.make_spec(a)
                res = solve_built(build(spec), opts)
            except (LdtError, ArithmeticError, np.linalg.LinAlgError) as exc:
                records.append(RunRecord(application=app.name, method=method, alpha=a, status="failed",
                                         seed=cfg.seed, message=str(exc)))
                continue
            check = None
            msg = ""
            if res.ok:
                try:
                    check = check_feasibility(spec, res, sweep_seed(base, k), kw["cap"], N=kw["N"])
                except (LdtError, InvalidArgument) as exc:
                    msg = f"feasibility check failed: {exc}"
            records.append(_result_record(app, method, cfg, res, False, check, time.perf_counter() - t0, msg))
    return records, _figures(cfg, records)


def run_sweep(cfg, app: Application):
    """Warm-started alpha homotopy per method."""
    cfg.require_sweep_alphas()
    opts = solver_options(cfg)
    base = derive_seed(cfg.seed, TAG_MC)
    kw = _check_kwargs(cfg)
    records = []
    for method in cfg.methods:
        build = _builder(cfg, app, method)
        steps = alpha_sweep(app.make_spec(cfg.alpha[0]), cfg.alpha, build, opts, warm=True, check=True,
                            seed=base, mc_cap=kw["cap"], check_N=kw["N"])
        for st in steps:
            if st.result is None:
                records.append(RunRecord(application=app.name, method=method, alpha=st.alpha, status=st.status,
                                         seed=cfg.seed, message=st.error,
                                         wall_time_s=st.wall_time if cfg.timing else None))
                continue
            check = (st.mc, st.check, st.log_gap) if st.mc is not None else None
            records.append(_result_record(app, method, cfg, st.result, st.warm, check, st.wall_time, st.error))
    return records, _figures(cfg, records)


def _figures(cfg, records):
    alphas = sorted({r.alpha for r in records if r.alpha is not None}, reverse=True)
    methods = list(dict.fromkeys(r.method for r in records))

    def table(attr):
        rows = []
        for a in alphas:
            row = [a]
            for m in methods:
                hit = [r for r in records if r.alpha == a and r.method == m]
                row.append(getattr(hit[0], attr) if hit else None)
            rows.append(row)
        return ["alpha"] + methods, rows

    out = {"fig_objective.csv": table("objective"), "fig_log_gap.csv": table("log10_gap")}
    if cfg.timing:
        out["fig_time.csv"] = table("wall_time_s")
    return out


# ---------------------------------------------------------------------------
# summary

def _cell(v, width):
    if v is None or v == "":
        s = "-"
    elif isinstance(v, float):
        s = "-inf" if v == -math.inf else ("inf" if v == math.inf else f"{v:.4g}")
    else:
        s = str(v)
    return s.rjust(width)


def summary_text(records, mode):
    if mode == "estimate":
        cols = [("method", 8), ("z", 8), ("probability", 12), ("log10_error", 12), ("check_N", 10),
                ("correction", 11), ("status", 18)]
    else:
        cols = [("method", 8), ("alpha", 9), ("objective", 11), ("log10_probability", 18), ("check_p_hat", 12),
                ("log10_gap", 10), ("feasible", 9), ("status", 16), ("wall_time_s", 12)]
    lines = ["".join(name.rjust(w) for name, w in cols)]
    for r in records:
        lines.append("".join(_cell(getattr(r, name), w) for name, w in cols))
    return "\n".join(lines) + "\n"


MODES = {"estimate": run_estimate, "optimize": run_optimize, "sweep": run_sweep}


def run(cfg, mode, out_dir=None):
    """Execute ``mode`` for ``cfg`` and write the report files; returns the records."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    app = build_application(cfg)
    records, extra = MODES[mode](cfg, app)
    out = out_dir or cfg.resolve(cfg.output)
    try:
        os.makedirs(out, exist_ok=True)
        write_records(os.path.join(out, "records.csv"), records)
        with open(os.path.join(out, "summary.txt"), "w") as fh:
            fh.write(summary_text(records, mode))
        for name, (header, rows) in extra.items():
            _write_csv(os.path.join(out, name), header, rows)
    except OSError as exc:
        raise ConfigError(f"cannot write outputs to {out}: {exc}") from None
    return records
