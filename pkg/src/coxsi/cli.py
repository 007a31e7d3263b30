"""Command line entry point: ``coxsi {simulate,analyze-real,plot,calibrate-lambda}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .harness import ConfigError, expand_grid, load_config, run_simulation
from .penalized import SelectionSpec, TuningRule, calibrate_fixed_lambda
from .plots import emit_plots
from .realdata import REAL_METHODS, SchemaError, analyze_real, export_calibrated, load_real


def _grid_from_args(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = {**cfg, "seed": args.seed}
    if getattr(args, "nsim", None) is not None:
        cfg = {**cfg, "n_sim": args.nsim}
    return expand_grid(cfg, base_dir=Path(args.config).resolve().parent)


def cmd_simulate(args) -> int:
    grid = _grid_from_args(args)
    logging.info("%d scenarios x %d replicates", len(grid), grid.n_sim)
    paths = run_simulation(grid, threads=args.threads, out_dir=args.out, progress=True)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return 0


def cmd_analyze_real(args) -> int:
    data = load_real(args.data, args.time_col, args.event_col, args.covariates)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = sorted(set(methods) - set(REAL_METHODS))
    if unknown:
        raise SchemaError(f"unknown methods {unknown}; choose from {REAL_METHODS}")
    spec = SelectionSpec(flavor=args.flavor, rule=TuningRule.parse(args.tuning))
    report = analyze_real(data, args.subsamples, args.fraction, methods, spec, args.alpha, args.seed)
    paths = report.write(args.out)
    if args.export_calibrated:
        export_calibrated(data, Path(args.out) / "calibrated_scenario.json")
        paths["calibrated"] = Path(args.out) / "calibrated_scenario.json"
    for k, v in paths.items():
        print(f"{k}: {v}")
    return 0


def cmd_plot(args) -> int:
    for path in emit_plots(args.summary, args.out):
        print(path)
    return 0


def cmd_calibrate_lambda(args) -> int:
    grid = _grid_from_args(args)
    s = grid.settings
    out = {}
    for k, scenario in enumerate(grid.scenarios):
        for flavor in s.flavors:
            rng = np.random.default_rng(np.random.SeedSequence([grid.base_seed, k]))
            spec = SelectionSpec(flavor=flavor, gamma=s.gamma, folds=s.folds)
            lam = calibrate_fixed_lambda(scenario, n_pop=args.n_pop, n_rep=args.n_rep, rng=rng, spec=spec)
            key = scenario.scenario_id if len(s.flavors) == 1 else f"{scenario.scenario_id}|{flavor}"
            out[key] = lam
            logging.info("%s: lambda = %.6g", key, lam)
    text = json.dumps({"fixed_lambdas": out}, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coxsi", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a simulation grid")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--threads", type=int, default=1)
    sim.add_argument("--nsim", type=int, help="override n_sim from the config")
    sim.set_defaults(func=cmd_simulate)

    real = sub.add_parser("analyze-real", help="subsampling analysis of a survival CSV")
    real.add_argument("--data", required=True)
    real.add_argument("--time-col", required=True)
    real.add_argument("--event-col", required=True)
    real.add_argument("--covariates", required=True,
                      help='comma list of name[:num|bin|cat][levels], e.g. "age:num,grade:cat[1|2|3]"')
    real.add_argument("--subsamples", type=int, default=100)
    real.add_argument("--fraction", type=float, default=0.8)
    real.add_argument("--methods", default="refit,split,debiased,exact_psi")
    real.add_argument("--tuning", default="cv_min")
    real.add_argument("--flavor", default="standard", choices=["standard", "adaptive"])
    real.add_argument("--alpha", type=float, default=0.1)
    real.add_argument("--seed", type=int, default=1)
    real.add_argument("--export-calibrated", action="store_true")
    real.add_argument("--out", required=True)
    real.set_defaults(func=cmd_analyze_real)

    plot = sub.add_parser("plot", help="render SVG figures from a summary CSV")
    plot.add_argument("--summary", required=True)
    plot.add_argument("--out", required=True)
    plot.set_defaults(func=cmd_plot)

    cal = sub.add_parser("calibrate-lambda", help="median cv_min lambda per scenario for the fixed rule")
    cal.add_argument("--config", required=True)
    cal.add_argument("--seed", type=int)
    cal.add_argument("--n-pop", type=int, default=100_000)
    cal.add_argument("--n-rep", type=int, default=1000)
    cal.add_argument("--out")
    cal.set_defaults(func=cmd_calibrate_lambda)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
