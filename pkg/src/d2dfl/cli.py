"""Command line entry point: ``d2dfl run | synth | check``.

Exit status: 0 on success, 1 on a configuration or usage error, 2 on a data
error, 3 when a self-check fails.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import datasets, protocols, runner, selfcheck
from .datasets import DatasetError
from .runner import ConfigError, ExperimentConfig

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_CHECK = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="d2dfl", description="Decentralised federated learning over a simulated D2D link.", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = ExperimentConfig()
    r = sub.add_parser("run", help="simulate one experiment and write its trace", formatter_class=fmt)
    r.add_argument("--config", metavar="PATH", default=None,
                   help="JSON config file (keys as in ExperimentConfig); built-in defaults if omitted")
    r.add_argument("--seed", type=int, default=None, help=f"learning seed (config default {d.learning_seed})")
    r.add_argument("--out", metavar="PATH", default=None, help="trace CSV path (default trace.csv)")
    r.add_argument("--protocol", choices=protocols.PROTOCOLS, default=None,
                   help=f"learning regime (config default {d.protocol})")
    r.add_argument("--rounds", type=int, default=None, help="stop after this many rounds")
    r.add_argument("--time-budget", type=float, default=None,
                   help=f"simulated seconds to run (config default {d.time_budget_s:g})")
    r.add_argument("--eval-stride", type=int, default=None,
                   help=f"evaluate every N rounds (config default {d.eval_stride})")
    r.add_argument("--bler", type=float, default=None, help=f"frame error rate (config default {d.bler:g})")

    s = sub.add_parser("synth", help="write a synthetic radar dataset directory", formatter_class=fmt)
    s.add_argument("--per-class", type=int, default=150, help="samples per class and split")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--out", metavar="DIR", default="synthetic_radar", help="output directory")

    sub.add_parser("check", help="run the built-in oracle checks", formatter_class=fmt)
    return p


def cmd_run(args) -> int:
    overrides = dict(
        learning_seed=args.seed, protocol=args.protocol, output_path=args.out,
        rounds=args.rounds, time_budget_s=args.time_budget,
        eval_stride=args.eval_stride, bler=args.bler,
    )
    try:
        if args.config is not None:
            config = runner.load_config(args.config, **overrides)
        else:
            config = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
        if args.rounds is not None and args.time_budget is None:
            config = config.replace(time_budget_s=None)
        if config.output_path is None:
            config = config.replace(output_path="trace.csv")
    except (ConfigError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        trace = runner.run(config)
    except (DatasetError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    print(
        f"protocol={config.protocol} rounds={trace.rounds_run} "
        f"time_s={trace.time_s[-1]:g} final_loss={trace.final_loss:.6g} "
        f"total_kb={trace.cum_kb_per_agent[-1]:g} kb_per_round={trace.kb_per_round:g} "
        f"trace={config.output_path}"
    )
    return 0


def cmd_synth(args) -> int:
    try:
        d = datasets.gen_synthetic(args.per_class, args.seed)
        out = datasets.save_radar(d, args.out)
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {d.train_maps.shape[0]} train / {d.test_maps.shape[0]} test maps to {out}")
    return 0


def cmd_check(args) -> int:
    failed = 0
    for check in selfcheck.CHECKS:
        name, ok, detail = check()
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}", flush=True)
    return EXIT_CHECK if failed else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return {"run": cmd_run, "synth": cmd_synth, "check": cmd_check}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
