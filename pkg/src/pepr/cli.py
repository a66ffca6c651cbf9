"""pepr command line: precompute, train, evaluate, report, run.

Exit codes: 0 success, 1 config error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import load_config, parse_seeds
from .errors import PeprError

COMMANDS = {
    "precompute": pipeline.cmd_precompute,
    "train": pipeline.cmd_train,
    "evaluate": pipeline.cmd_evaluate,
    "report": pipeline.cmd_report,
    "run": pipeline.cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [run], [data], [cache], [train] sections")
    common.add_argument("--seed", type=int, action="append", dest="seed_list",
                        help="run seed (repeatable)")
    common.add_argument("--seeds", help="comma list and/or inclusive ranges, e.g. 0-9")
    common.add_argument("--methods", help="comma list, e.g. MSP,MOS,CPEPR,PEPR-10")
    common.add_argument("--out", help="output directory")
    common.add_argument("--ensemble-size", type=int, help="regressors per ensemble method")
    common.add_argument("--scale-factor", type=float, help="network width factor")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pepr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).strip().splitlines()[0])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        seeds = None
        if args.seeds:
            seeds = parse_seeds(args.seeds)
        if args.seed_list:
            seeds = tuple(seeds or ()) + tuple(args.seed_list)
        methods = None
        if args.methods:
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        cfg = load_config(args.config, seeds=seeds, methods=methods, out=args.out,
                          ensemble_size=args.ensemble_size, scale_factor=args.scale_factor)
        result = COMMANDS[args.command](cfg)
    except PeprError as exc:
        print(f"pepr {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    if args.command in ("report", "run"):
        for path in result:
            print(path)
    elif args.command == "evaluate":
        print(f"{len(result)} records -> {cfg.out_dir / 'records.csv'}")
    elif args.command == "precompute":
        print(f"cache at {result.path} ({sum(v['rows'] for v in result.index['files'].values())} rows)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
