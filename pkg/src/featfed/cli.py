"""Command line: ``featfed run`` and ``featfed cost``."""

from __future__ import annotations

import argparse
import logging
import sys

from .cost import PRESETS, CostModel, format_cost_table
from .errors import FeatFedError
from .harness import CONFIG_FIELDS, cost_table, load_config, run_experiment, summarize, write_metrics


def _add_config_flags(parser):
    for name in CONFIG_FIELDS:
        flags = [f"--{name}"]
        if "_" in name:
            flags.append(f"--{name.replace('_', '-')}")
        parser.add_argument(*flags, dest=f"cfg_{name}", default=None, metavar="VALUE",
                            help=argparse.SUPPRESS if name not in ("strategy", "seed") else None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featfed", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write per-round metrics")
    run.add_argument("--config", help="key = value experiment file; any key can also be given as a flag")
    run.add_argument("--out", help="metrics CSV path (default: stdout)")
    _add_config_flags(run)

    cost = sub.add_parser("cost", help="bytes sent per round for every strategy")
    cost.add_argument("--preset", choices=sorted(PRESETS))
    cost.add_argument("--w-bytes", type=int)
    cost.add_argument("--d", type=int)
    cost.add_argument("--clients", type=int)
    cost.add_argument("--classes", type=int)
    cost.add_argument("--samples", type=int)
    return parser


def _cmd_run(args) -> int:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    cfg = load_config(args.config, overrides)
    metrics = run_experiment(cfg)
    if args.out:
        write_metrics(metrics, args.out)
        print(summarize(metrics))
    else:
        write_metrics(metrics, "/dev/stdout")
    return 0


def _cmd_cost(args) -> int:
    explicit = {"w_bytes": args.w_bytes, "d": args.d, "n_clients": args.clients,
                "n_classes": args.classes, "n_samples": args.samples}
    if args.preset:
        base = PRESETS[args.preset]
        given = {k: v for k, v in explicit.items() if v is not None}
        if not given:
            print(cost_table(args.preset))
            return 0
        model = CostModel(**{**base.__dict__, **given})
    else:
        missing = [k for k, v in explicit.items() if v is None]
        if missing:
            raise FeatFedError(f"cost: give --preset or all of --w-bytes --d --clients --classes --samples "
                               f"(missing {', '.join(missing)})")
        model = CostModel(**explicit)
    print(format_cost_table(model))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_cost(args)
    except (FeatFedError, OSError) as exc:
        print(f"featfed: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
