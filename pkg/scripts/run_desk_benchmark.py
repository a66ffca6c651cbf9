"""Run the desk benchmark end to end and print the summary table.

    python3 scripts/run_desk_benchmark.py --out runs/desk --seeds 0-9
"""

import argparse
import time

from pepr.config import load_config, parse_seeds
from pepr.pipeline import cmd_run, report_dir


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seeds", default=None)
    p.add_argument("--scale-factor", type=float, default=None)
    args = p.parse_args()
    cfg = load_config(args.config, out=args.out, scale_factor=args.scale_factor,
                      seeds=parse_seeds(args.seeds) if args.seeds else None)
    t0 = time.perf_counter()
    cmd_run(cfg)
    print((report_dir(cfg) / "table1.md").read_text())
    print(f"{len(cfg.seeds)} seeds in {time.perf_counter() - t0:.0f}s; outputs in {cfg.out_dir}")


if __name__ == "__main__":
    main()
