"""Command-line entry point: ``protoope <command> [--config F] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import PRESETS, ConfigError, load_config
from .mdp import SolverDivergence
from .nn import NumericalError
from .ope import ZeroPropensityError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _common() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the subcommand from being reset after it
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (unsigned 64-bit)")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="protoope", parents=[common], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="simulate train / calibration / evaluation splits")

    p = sub.add_parser("fit-behavior", parents=[common], help="train, calibrate and score a behavior estimator")
    p.add_argument("--data", help="directory holding the split files (default OUT/data)")

    p = sub.add_parser("evaluate", parents=[common], help="IS / WIS value estimates and diagnostics")
    p.add_argument("--data", help="directory holding the split files (default OUT/data)")
    p.add_argument("--model", help="model file (default OUT/model.json)")
    p.add_argument("--target", help="zero-drug, learned, behavior-estimate or a policy JSON file")

    p = sub.add_parser("bias-sweep", parents=[common], help="weight-ratio and value-error sweep over horizons")
    p.add_argument("--preset", choices=sorted(PRESETS), help="size preset applied before the config file")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("proto-report", parents=[common], help="export the prototypes of a trained model")
    p.add_argument("--model", help="model file (default OUT/model.json)")
    return parser


def _overrides(args) -> dict:
    values = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set: expected KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    seed = getattr(args, "seed", None)
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        values["seed"] = seed
    if getattr(args, "out", None) is not None:
        values["out_dir"] = args.out
    return values


def run(args) -> object:
    from . import experiment as ex

    cfg = load_config(getattr(args, "config", None), getattr(args, "preset", None), **_overrides(args))
    if args.command == "gen-data":
        return ex.cmd_gen_data(cfg)
    if args.command == "fit-behavior":
        return ex.cmd_fit_behavior(cfg, args.data)
    if args.command == "evaluate":
        return ex.cmd_evaluate(cfg, args.model, args.target, args.data)
    if args.command == "bias-sweep":
        if args.jobs < 1:
            raise ConfigError("jobs: must be >= 1")
        return ex.summarize_sweep(ex.cmd_bias_sweep(cfg, args.jobs))
    return ex.cmd_proto_report(cfg, args.model)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, SolverDivergence, ZeroPropensityError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    json.dump(result, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
