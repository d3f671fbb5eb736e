"""``ldtcc`` command line.

Exit codes: 0 success, 2 configuration / IO / usage error, 3 numeric
failure in a mandatory step.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from ..distributions import fit_em
from ..errors import ConfigError, LdtError, ParseError
from . import data
from .apps import TAG_FIT, TAG_SYNTH, derive_seed
from .config import load_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="experiment configuration (YAML or JSON)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--quiet", action="store_true", help="suppress the summary table")
    p.add_argument("--timing", action="store_true", help="record wall-clock times")


def build_parser():
    p = _Parser(prog="ldtcc", description="Rare-event probabilities and chance-constrained optimization via LDT.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, text in (("estimate", "probabilities at a fixed decision over the z grid"),
                       ("optimize", "one chance-constrained solve per method and alpha"),
                       ("sweep", "warm-started alpha homotopy")):
        _common(sub.add_parser(name, help=text))
    f = sub.add_parser("fit", help="fit a Gaussian mixture to a price CSV")
    f.add_argument("--csv", help="price CSV (date,SYM1,...); defaults to distribution.csv of --config")
    f.add_argument("-M", type=int, default=None, help="number of components (default 2)")
    f.add_argument("--output", "-o", help="parameters file to write (default: <out>/mixture_params.txt)")
    _common(f, config_required=False)
    s = sub.add_parser("selftest", help="derivative checks and the solver QP suite")
    s.add_argument("--quiet", action="store_true")
    g = sub.add_parser("synth", help="write a synthetic GBM price CSV")
    g.add_argument("--n", type=int, default=10, help="number of stocks")
    g.add_argument("--days", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--regimes", type=float, nargs=4, metavar=("P_CALM", "P_TURB", "VOL_SCALE", "DRIFT_SHIFT"))
    g.add_argument("--output", "-o", required=True)
    return p


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg.seed = args.seed
    if args.timing:
        cfg.timing = True
    return cfg


def _cmd_run(args):
    from .runner import run, summary_text
    cfg = _load(args)
    out = args.out or cfg.resolve(cfg.output)
    records = run(cfg, args.command, out)
    if not args.quiet:
        sys.stdout.write(summary_text(records, args.command))
        print(f"wrote {len(records)} records to {os.path.join(out, 'records.csv')}")
    return EXIT_OK


def _cmd_fit(args):
    cfg = _load(args) if args.config else None
    csv_path = args.csv or (cfg.resolve(cfg.distribution["csv"]) if cfg and "csv" in cfg.distribution else None)
    if csv_path is None:
        raise ConfigError("fit needs --csv or a config with distribution.csv")
    M = args.M or (cfg.distribution.get("M", 2) if cfg else 2)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    try:
        _, _, R = data.ingest_prices(csv_path)
    except OSError as exc:
        raise ConfigError(f"cannot read {csv_path}: {exc}") from None
    mix = fit_em(R - R.mean(axis=0), M, derive_seed(seed, TAG_FIT))
    target = args.output or os.path.join(args.out or (cfg.resolve(cfg.output) if cfg else "."),
                                         "mixture_params.txt")
    try:
        os.makedirs(os.path.dirname(os.path.abspath(target)), exist_ok=True)
        data.write_mixture_params(target, mix)
    except OSError as exc:
        raise ConfigError(f"cannot write {target}: {exc}") from None
    if not args.quiet:
        print(f"fitted M={mix.M} mixture to {R.shape[0]} returns of {R.shape[1]} symbols; wrote {target}")
    return EXIT_OK


def _cmd_selftest(args):
    from ..selftest import run_all
    ok = run_all(echo=(lambda s: None) if args.quiet else print)
    return EXIT_OK if ok else EXIT_NUMERIC


def _cmd_synth(args):
    prices = data.simulate_gbm(args.n, args.days, derive_seed(args.seed, TAG_SYNTH), regimes=args.regimes)
    try:
        data.write_prices(args.output, prices)
    except OSError as exc:
        raise ConfigError(f"cannot write {args.output}: {exc}") from None
    return EXIT_OK


COMMANDS = {"estimate": _cmd_run, "optimize": _cmd_run, "sweep": _cmd_run, "fit": _cmd_fit,
            "selftest": _cmd_selftest, "synth": _cmd_synth}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if getattr(args, "quiet", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ParseError) as exc:
        print(f"ldtcc: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LdtError as exc:
        print(f"ldtcc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
