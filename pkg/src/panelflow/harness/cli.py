"""``panelflow`` command line."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .config import ConfigError, parse_config
from .run import EXIT_FAILED, EXIT_USAGE, run_experiment

log = logging.getLogger("panelflow")

_COMMANDS = ("simulate", "stationary", "continuation", "decompose", "sweep-damping", "verify", "reconstruct",
             "hadamard")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panelflow", description="Delayed flow-plate experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    cmds = {}
    for name in _COMMANDS:
        cmds[name] = sub.add_parser(name, help=f"run the {name} experiment")
        cmds[name].add_argument("config", help="key = value configuration file")
    sweep = cmds["sweep-damping"]
    sweep.add_argument("--klo", type=float, required=True, help="lower damping of the bracket")
    sweep.add_argument("--khi", type=float, required=True, help="upper damping of the bracket")
    sweep.add_argument("--ndata", type=int, default=3, help="number of initial-data presets (1-3)")
    recon = cmds["reconstruct"]
    recon.add_argument("--time", type=float, required=True, help="evaluation time")
    recon.add_argument("--points", required=True, help="file with one 'x y z' row per point")
    cmds["hadamard"].add_argument("--delta", type=float, required=True, help="largest perturbation size")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"panelflow: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if cfg.experiment != args.command:
        log.info("config names experiment %r; running %r as requested", cfg.experiment, args.command)
        cfg = replace(cfg, experiment=args.command)
    extra = {}
    if args.command == "sweep-damping":
        extra = {"klo": args.klo, "khi": args.khi, "ndata": args.ndata}
    elif args.command == "reconstruct":
        extra = {"time": args.time, "points": args.points}
    elif args.command == "hadamard":
        extra = {"delta": args.delta}
    try:
        status = run_experiment(cfg, **extra)
    except (ValueError, RuntimeError, FloatingPointError, OSError) as exc:
        print(f"panelflow: {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    log.info("%s finished with status %d; outputs in %s", args.command, status, cfg.output)
    return status


if __name__ == "__main__":
    sys.exit(main())
