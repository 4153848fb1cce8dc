"""Command-line entry point: ``kinlab <experiment> [config] [overrides]``.

Exit status: 0 when every acceptance flag passes, 2 when any flag fails,
1 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ConfigError, KinlabError
from .experiments.config import Experiment, default_config, load_config, _parse_value
from .experiments.runners import run

SUBCOMMANDS = {
    "lanford": Experiment.LANFORD,
    "linear": Experiment.LINEAR,
    "diffusion": Experiment.DIFFUSION,
    "reversal": Experiment.REVERSAL,
    "collstats": Experiment.COLLISION_STATS,
    "dcoeff": Experiment.DCOEFF,
    "simulate": Experiment.SIMULATE,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kinlab", description="Kinetic-theory limits laboratory")
    sub = p.add_subparsers(dest="command", metavar="command")
    for name in SUBCOMMANDS:
        s = sub.add_parser(name, help=f"run the {name} experiment")
        s.add_argument("config", nargs="?", help="key = value configuration file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--ensemble", type=int, help="runs per sweep point")
        s.add_argument("--sweep", help="N:lambda pairs, comma separated")
        s.add_argument("--beta", type=float)
        s.add_argument("--gamma", type=float)
        s.add_argument("--workers", type=int)
        s.add_argument("--quiet", action="store_true")
    return p


def _configure(args):
    exp = SUBCOMMANDS[args.command]
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = load_config(path, defaults_for=exp)
        if cfg.experiment is not exp:
            raise ConfigError(f"{path} configures {cfg.experiment.value}, not {exp.value}")
    else:
        cfg = default_config(exp)
    sweep = _parse_value("sweep", args.sweep) if args.sweep else None
    cfg = cfg.with_overrides(seed=args.seed, out=args.out, ensemble=args.ensemble, sweep=sweep, beta=args.beta,
                             gamma=args.gamma, workers=args.workers)
    return cfg.validate()


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise _UsageError("kinlab: a command is required (" + " | ".join(SUBCOMMANDS) + ")")
        cfg = _configure(args)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"kinlab: configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        report = run(cfg, out_dir=cfg.out)
    except (KinlabError, ValueError) as exc:
        print(f"kinlab: {cfg.experiment.value} failed: {exc}", file=sys.stderr)
        return 1
    path = report.write(cfg.out)
    if not args.quiet:
        for name, (value, err) in report.summary().items():
            print(f"{name} = {value:.10g} +- {err:.3g}")
        for name, flag in report.flags.items():
            state = "n/a" if flag.passed is None else ("PASS" if flag.passed else "FAIL")
            print(f"[{state}] {name}: {flag.criterion}" + (f" ({flag.detail})" if flag.detail else ""))
        print(f"report written to {path}")
    return report.exit_code()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
