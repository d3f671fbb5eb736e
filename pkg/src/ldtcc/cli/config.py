"""Experiment configuration: a flat key-value schema stored as YAML or JSON.

Keys
----
application      portfolio | short_column | pde
distribution     {kind: gaussian | mixture | fit, M, csv, params}
z                threshold (scalar or list); unused by the VaR problem
alpha            risk level (scalar or list, strictly decreasing for sweeps)
methods          subset of ldt1, ldt2, saa, cvar, mc
method_params    {N, nu, tau, mc_N, mc_true_N, mc_check_N, mc_check_cap}
solver           SolverOptions fields
app              application parameters (see ``apps``)
output           output directory
seed             top-level seed
timing           record wall-clock times (makes records.csv run-dependent)
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from ..errors import ConfigError

APPLICATIONS = ("portfolio", "short_column", "pde")
DIST_KINDS = ("gaussian", "mixture", "fit")
METHOD_NAMES = ("ldt1", "ldt2", "saa", "cvar", "mc")
SOLVER_KEYS = ("tol_stationarity", "tol_feasibility", "max_outer", "max_inner", "rho0", "rho_growth",
               "rho_max", "gradient_mode", "fd_step", "memory")


def _as_list(v):
    if v is None:
        return []
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    return [float(v)]


@dataclass
class ExperimentConfig:
    application: str
    distribution: dict = field(default_factory=lambda: {"kind": "gaussian"})
    z: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    methods: list = field(default_factory=lambda: ["ldt1"])
    method_params: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    app: dict = field(default_factory=dict)
    output: str = "out"
    seed: int = 0
    timing: bool = False
    base_dir: str = field(default=".", compare=False, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.application not in APPLICATIONS:
            raise ConfigError(f"application must be one of {APPLICATIONS}, got {self.application!r}")
        if not isinstance(self.distribution, dict):
            raise ConfigError("distribution must be a mapping")
        kind = self.distribution.get("kind", "gaussian")
        if kind not in DIST_KINDS:
            raise ConfigError(f"distribution.kind must be one of {DIST_KINDS}, got {kind!r}")
        if kind == "fit" and "csv" not in self.distribution and "synth" not in self.app:
            raise ConfigError("distribution.kind 'fit' needs distribution.csv or app.synth")
        for key in ("csv", "params"):
            if key in self.distribution:
                p = self.resolve(self.distribution[key])
                if not os.path.isfile(p):
                    raise ConfigError(f"distribution.{key}: file not found: {p}")
        if "prices" in self.app and not os.path.isfile(self.resolve(self.app["prices"])):
            raise ConfigError(f"app.prices: file not found: {self.resolve(self.app['prices'])}")
        M = self.distribution.get("M", 2 if kind != "gaussian" else 1)
        if not isinstance(M, int) or M < 1:
            raise ConfigError("distribution.M must be a positive integer")
        try:
            self.z = _as_list(self.z)
            self.alpha = _as_list(self.alpha)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"z and alpha must be numbers or lists of numbers: {exc}") from None
        if any(not 0 < a < 1 for a in self.alpha):
            raise ConfigError("every alpha must lie in (0, 1)")
        if isinstance(self.methods, str):
            self.methods = [self.methods]
        bad = [m for m in self.methods if m not in METHOD_NAMES]
        if bad or not self.methods:
            raise ConfigError(f"unknown method(s) {bad}; expected a subset of {METHOD_NAMES}")
        unknown = set(self.solver) - set(SOLVER_KEYS)
        if unknown:
            raise ConfigError(f"unknown solver option(s) {sorted(unknown)}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        self.timing = bool(self.timing)

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def require_sweep_alphas(self):
        if len(self.alpha) < 1:
            raise ConfigError("a sweep needs at least one alpha")
        if any(b >= a for a, b in zip(self.alpha, self.alpha[1:])):
            raise ConfigError("alpha list must be strictly decreasing for a sweep")

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return d

    @classmethod
    def from_dict(cls, data, base_dir="."):
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        names = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown configuration key(s) {sorted(unknown)}")
        if "application" not in data:
            raise ConfigError("configuration needs an 'application' key")
        return cls(**copy.deepcopy(data), base_dir=base_dir)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if str(path).endswith(".json"):
            data = json.loads(text)
        else:
            data = yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return ExperimentConfig.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))


def dump_config(cfg: ExperimentConfig, path):
    d = cfg.to_dict()
    with open(path, "w") as fh:
        if str(path).endswith(".json"):
            json.dump(d, fh, indent=2, sort_keys=True)
        else:
            yaml.safe_dump(d, fh, sort_keys=True)
