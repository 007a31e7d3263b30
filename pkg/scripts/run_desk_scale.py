"""Run one of the bundled desk-scale configs and print the headline summary rows.

Example::

    python scripts/run_desk_scale.py configs/desk_coverage_n400.json --out runs/coverage
"""

import argparse
import time
from pathlib import Path

import pandas as pd

from coxsi.harness import expand_grid, run_simulation

COLUMNS = ["scenario_id", "method", "tuning", "coverage", "median_width", "power", "type1",
           "mean_model_size", "mean_p_true"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", type=Path)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--coef", default="pooled", help="coef_index to show (default: pooled rows)")
    args = ap.parse_args(argv)

    t0 = time.perf_counter()
    paths = run_simulation(expand_grid(args.config), threads=args.threads, out_dir=args.out, progress=True)
    summary = pd.read_csv(paths["summary"], dtype={"coef_index": str})
    rows = summary[summary["coef_index"] == args.coef]
    with pd.option_context("display.width", 200, "display.max_columns", None):
        print(rows[[c for c in COLUMNS if c in rows.columns]].to_string(index=False))
    print(f"wall time {time.perf_counter() - t0:.0f}s; outputs in {args.out}")


if __name__ == "__main__":
    main()
