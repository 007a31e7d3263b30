"""Simulation grid runner.

A run is fully determined by its JSON configuration and base seed.  Each
(scenario, iteration) pair gets its own seed sequence, so results do not
depend on how work is spread over processes.  Finished scenarios are written
as part files and recorded in ``manifest.json``; a rerun skips them.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import jsonschema
import numpy as np

from . import __version__
from .datagen import BaselineSpec, CalibratedScenario, ToyScenario, generate, submodel_truth
from .inference import (
    SelectionEvent,
    SelectiveInterval,
    estimate_nodewise_inverse,
    infer_debiased,
    infer_exact_psi,
    infer_full,
    infer_oracle,
    infer_refit,
    infer_refit0,
    infer_split,
)
from .metrics import (
    POOLED,
    IterationResult,
    TargetTable,
    failure_summary,
    harrell_cindex,
    integrated_brier,
    p_true,
    sci_width,
    selection_quality,
    selective_coverage,
    selective_power_type1,
)
from .penalized import SelectionSpec, TuningRule, select_model
from .survival_core import SeparationWarning, SurvivalDataset, breslow_from_beta, predict_survival

log = logging.getLogger(__name__)

ALL_METHODS = ("full", "oracle", "refit", "refit0", "split", "debiased", "exact_psi")
UNTUNED = ("full", "oracle")

DEFAULT_FACTORS = {
    "n": [75, 175, 275, 375, 475, 575, 675, 775],
    "p": [10, 20, 50],
    "rho": [0.0, 0.3],
    "censor_target": [0.0, 0.1, 0.3],
    "baseline": ["exponential", "weibull"],
    "pattern": ["sparse", "realistic", "highcontrast", "allones"],
}

LONG_COLUMNS = [
    "scenario_id", "n", "p", "rho", "censor_target", "baseline", "pattern", "lasso_flavor",
    "method", "tuning", "iteration", "coef_index", "selected", "estimate", "lower", "upper",
    "degenerate", "target_kind", "target_value", "covered", "rejected_zero", "runtime_seconds",
    "model_size", "p_true", "ibs", "cindex", "flags",
]

_factor = {"type": "array", "minItems": 1}
CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "scenarios": {
            "type": "object",
            "properties": {
                "n": {**_factor, "items": {"type": "integer", "minimum": 4}},
                "p": {**_factor, "items": {"type": "integer", "minimum": 1}},
                "rho": {**_factor, "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}},
                "censor_target": {**_factor, "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}},
                "baseline": {**_factor, "items": {"type": ["string", "object"]}},
                "pattern": {**_factor, "items": {"type": "string",
                                                 "enum": ["sparse", "realistic", "highcontrast", "allones"]}},
            },
            "additionalProperties": False,
        },
        "calibrated": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "file": {"type": "string"},
                    "n": {**_factor, "items": {"type": "integer", "minimum": 4}},
                    "censor_target": {**_factor, "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}},
                },
                "required": ["file"],
            },
        },
        "methods": {**_factor, "items": {"enum": list(ALL_METHODS)}},
        "tuning_rules": {**_factor, "items": {"type": "string", "pattern": "^(cv_min|cv_1se|aic|bic|fixed(:.+)?)$"}},
        "lasso": {
            "type": "object",
            "properties": {
                "flavors": {**_factor, "items": {"enum": ["standard", "adaptive"]}},
                "gamma": {"type": "integer", "enum": [1, 2]},
            },
            "additionalProperties": False,
        },
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "n_sim": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "n_test": {"type": "integer", "minimum": 0},
        "folds": {"type": "integer", "minimum": 2},
        "record_runtime": {"type": "boolean"},
        "truth_n_pop": {"type": "integer", "minimum": 1000},
        "nodewise_c": {"type": "number", "exclusiveMinimum": 0},
        "debiased_target": {"enum": ["full_model", "projection"]},
        "fixed_lambdas": {"type": "object", "additionalProperties": {"type": "number", "exclusiveMinimum": 0}},
    },
    "required": ["scenarios"],
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimSettings:
    methods: tuple = ALL_METHODS
    tuning_rules: tuple = ("cv_min",)
    flavors: tuple = ("standard",)
    gamma: int = 1
    alpha: float = 0.1
    n_sim: int = 1000
    seed: int = 1
    n_test: int = 500
    folds: int = 10
    record_runtime: bool = False
    truth_n_pop: int = 200_000
    nodewise_c: float = 1.0
    debiased_target: str = "full_model"
    fixed_lambdas: tuple = ()

    def fixed_lambda(self, scenario_id: str, flavor: str = "standard") -> float:
        table = dict(self.fixed_lambdas)
        for key in (f"{scenario_id}|{flavor}", scenario_id):
            if key in table:
                return table[key]
        raise ConfigError(f"tuning rule 'fixed' needs fixed_lambdas[{scenario_id!r}]")


@dataclass
class ScenarioGrid:
    scenarios: list
    settings: SimSettings
    config: dict = field(default_factory=dict)

    @property
    def n_sim(self) -> int:
        return self.settings.n_sim

    @property
    def base_seed(self) -> int:
        return self.settings.seed

    def __len__(self):
        return len(self.scenarios)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()


def load_config(source) -> dict:
    """Read a JSON config (path, JSON string or dict) and validate it."""
    if isinstance(source, dict):
        cfg = source
    else:
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        cfg = json.loads(text)
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(x) for x in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {path}: {exc.message}") from None
    return cfg


def _dedupe(name, values):
    out = []
    for v in values:
        key = json.dumps(v, sort_keys=True)
        if key in [json.dumps(o, sort_keys=True) for o in out]:
            warnings.warn(f"duplicate value {v!r} in factor {name!r} dropped", stacklevel=3)
            continue
        out.append(v)
    return out


def expand_grid(config, base_dir: Optional[Path] = None) -> ScenarioGrid:
    """Cartesian product of the configured factor lists, in a fixed order.

    Missing factors fall back to :data:`DEFAULT_FACTORS`.
    """
    cfg = load_config(config)
    factors = {k: _dedupe(k, cfg["scenarios"].get(k, v)) for k, v in DEFAULT_FACTORS.items()}
    scenarios = []
    for n, p, rho, cens, base, pattern in itertools.product(*(factors[k] for k in DEFAULT_FACTORS)):
        scenarios.append(ToyScenario(n=n, p=p, rho=float(rho), censor_target=float(cens),
                                     baseline=BaselineSpec.parse(base), pattern=pattern))
    for entry in cfg.get("calibrated", []):
        fpath = Path(entry["file"])
        if not fpath.is_absolute() and base_dir is not None:
            fpath = base_dir / fpath
        obj = json.loads(fpath.read_text())
        for n, cens in itertools.product(_dedupe("n", entry.get("n", [200])),
                                         _dedupe("censor_target", entry.get("censor_target", [0.0]))):
            scenarios.append(CalibratedScenario.from_json(obj, n=n, censor_target=float(cens)))
    ids = [s.scenario_id for s in scenarios]
    if len(set(ids)) != len(ids):
        raise ConfigError("scenario ids are not unique")
    lasso = cfg.get("lasso", {})
    settings = SimSettings(
        methods=tuple(_dedupe("methods", cfg.get("methods", list(ALL_METHODS)))),
        tuning_rules=tuple(_dedupe("tuning_rules", cfg.get("tuning_rules", ["cv_min"]))),
        flavors=tuple(_dedupe("flavors", lasso.get("flavors", ["standard"]))),
        gamma=lasso.get("gamma", 1),
        alpha=cfg.get("alpha", 0.1),
        n_sim=cfg.get("n_sim", 1000),
        seed=cfg.get("seed", 1),
        n_test=cfg.get("n_test", 500),
        folds=cfg.get("folds", 10),
        record_runtime=cfg.get("record_runtime", False),
        truth_n_pop=cfg.get("truth_n_pop", 200_000),
        nodewise_c=cfg.get("nodewise_c", 1.0),
        debiased_target=cfg.get("debiased_target", "full_model"),
        fixed_lambdas=tuple(sorted(cfg.get("fixed_lambdas", {}).items())),
    )
    return ScenarioGrid(scenarios, settings, cfg)


# --- one replicate -----------------------------------------------------------

def _stable_int(text: str) -> int:
    return int(hashlib.sha256(text.encode()).hexdigest()[:16], 16)


def scenario_seed(base_seed: int, scenario_id: str, iteration: int, *labels) -> np.random.SeedSequence:
    """Seed sequence derived from ``(base_seed, scenario_id, iteration, labels...)``."""
    key = [int(base_seed), _stable_int(scenario_id), int(iteration)] + [_stable_int(str(x)) for x in labels]
    return np.random.SeedSequence(key)


def _rng(*key):
    return np.random.default_rng(scenario_seed(*key))


def _predictive(train: SurvivalDataset, beta_std: np.ndarray, test: Optional[SurvivalDataset]):
    """IBS and C-index of a Cox model with the given standardised coefficients."""
    if test is None:
        return float("nan"), float("nan")
    subset = np.flatnonzero(beta_std != 0)
    base = breslow_from_beta(train, beta_std[subset], subset)
    model = lambda times: predict_survival(base, beta_std[subset], subset, test.X, times)
    try:
        ibs = integrated_brier(test, model)
    except ValueError:
        ibs = float("nan")
    return ibs, harrell_cindex(test, test.X @ beta_std)


def _beta_from_intervals(data: SurvivalDataset, intervals: Sequence[SelectiveInterval]) -> np.ndarray:
    beta = np.zeros(data.p)
    for iv in intervals:
        if np.isfinite(iv.estimate):
            beta[iv.coef_index] = iv.estimate * data.scale[iv.coef_index]
    return beta


class _Tracker:
    """Counts separation warnings raised while a method runs."""

    def __enter__(self):
        self._cm = warnings.catch_warnings(record=True)
        self.caught = self._cm.__enter__()
        warnings.simplefilter("always", SeparationWarning)
        return self

    def __exit__(self, *exc):
        self._cm.__exit__(*exc)
        return False

    @property
    def separations(self) -> int:
        return sum(issubclass(w.category, SeparationWarning) for w in self.caught)


def run_iteration(scenario, settings: SimSettings, iteration: int) -> List[IterationResult]:
    """All configured methods on one simulated dataset."""
    sid = scenario.scenario_id
    base = settings.seed
    data = generate(scenario, _rng(base, sid, iteration, "data")).standardize()
    test = None
    if settings.n_test:
        test = generate(scenario, _rng(base, sid, iteration, "test"), n=settings.n_test).standardize_like(data)
    beta0 = scenario.beta
    alpha = settings.alpha
    out = []

    def record(method, tuning, flavor, fn):
        t0 = time.perf_counter()
        flags = {}
        selected, intervals = (), []
        pred_beta = None
        try:
            with _Tracker() as tr:
                selected, intervals, pred_beta = fn()
            if tr.separations:
                flags["separation"] = tr.separations
        except Exception as exc:  # a failing replicate is recorded, not fatal
            flags["failed"] = type(exc).__name__
            log.debug("%s %s it=%d failed: %r", sid, method, iteration, exc)
        deg = sum(iv.degenerate for iv in intervals)
        if deg:
            flags["degenerate"] = deg
        ibs = cidx = float("nan")
        if pred_beta is not None and "failed" not in flags:
            ibs, cidx = _predictive(*pred_beta, test)
        out.append(IterationResult(sid, method, tuning, iteration, selected, intervals,
                                   time.perf_counter() - t0, flags, flavor, ibs, cidx))

    methods = settings.methods
    if "full" in methods:
        def _full():
            ivs = infer_full(data, alpha)
            return tuple(range(data.p)), ivs, (data, _beta_from_intervals(data, ivs))
        record("full", "none", "none", _full)
    if "oracle" in methods:
        def _oracle():
            act = np.flatnonzero(beta0 != 0)
            ivs = infer_oracle(data, act, alpha)
            return tuple(act.tolist()), ivs, (data, _beta_from_intervals(data, ivs))
        record("oracle", "none", "none", _oracle)

    tuned = [m for m in methods if m not in UNTUNED]
    if not tuned:
        return out
    for flavor, rule_text in itertools.product(settings.flavors, settings.tuning_rules):
        rule = TuningRule.parse(rule_text)
        if rule.kind == "fixed" and rule.value is None:
            rule = TuningRule("fixed", settings.fixed_lambda(sid, flavor))
        spec = SelectionSpec(flavor=flavor, rule=rule, gamma=settings.gamma, folds=settings.folds)
        tuning = rule_text
        t0 = time.perf_counter()
        try:
            sel = select_model(data, spec, _rng(base, sid, iteration, "select", flavor, tuning))
            sel_err = None
        except Exception as exc:
            sel, sel_err = None, exc
        sel_time = time.perf_counter() - t0

        def needs_selection(fn):
            def run():
                if sel_err is not None:
                    raise sel_err
                return fn()
            return run

        E = tuple(sel.fit.active.tolist()) if sel is not None else ()
        event = SelectionEvent.from_fit(sel.fit, sel.weights) if sel is not None else None
        for method in tuned:
            if method == "refit":
                def fn():
                    ivs = infer_refit(data, event, alpha)
                    return E, ivs, (data, _beta_from_intervals(data, ivs))
            elif method == "refit0":
                def fn():
                    ivs = infer_refit0(data, sel.fit, alpha)
                    return E, ivs, (data, _beta_from_intervals(data, ivs))
            elif method == "exact_psi":
                def fn():
                    ivs = infer_exact_psi(data, sel.fit, alpha, weights=sel.weights)
                    return E, ivs, (data, _beta_from_intervals(data, ivs))
            elif method == "debiased":
                def fn():
                    nw = estimate_nodewise_inverse(data, sel.fit.beta, c=settings.nodewise_c)
                    ivs_all = infer_debiased(data, sel.fit, nw, alpha)
                    if settings.debiased_target == "projection":
                        for iv in ivs_all:
                            iv.target_kind = "submodel"
                    ivs = [iv for iv in ivs_all if iv.coef_index in set(E)]
                    return E, ivs, (data, _beta_from_intervals(data, ivs_all))
            elif method == "split":
                def fn():
                    ev, ivs, _ = infer_split(data, spec, alpha, _rng(base, sid, iteration, "split", flavor, tuning))
                    return tuple(ev.active.tolist()), ivs, (data, _beta_from_intervals(data, ivs))
            else:
                raise ConfigError(f"unknown method {method!r}")
            record(method, tuning, flavor, fn if method == "split" else needs_selection(fn))
            if method != "split":
                out[-1].runtime_seconds += sel_time
    return out


# --- persistence ---------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "" if np.isnan(x) else repr(float(x))
    return str(x)


def _flags_text(flags: dict) -> str:
    return ";".join(f"{k}={v}" for k, v in sorted(flags.items()))


def _parse_flags(text: str) -> dict:
    out = {}
    for part in filter(None, text.split(";")):
        k, v = part.split("=", 1)
        out[k] = int(v) if v.lstrip("-").isdigit() else v
    return out


def _baseline_label(scenario) -> str:
    b = scenario.baseline
    return "exponential" if b.kind == "exponential" else f"weibull({b.shape:g},{b.scale:g})"


def _target_value(scenario, res: IterationResult, iv: SelectiveInterval, n_pop: int) -> float:
    if iv.target_kind == "full_model":
        return float(scenario.beta[iv.coef_index])
    truth = submodel_truth(scenario, list(res.selected), n_pop=n_pop)
    return float(truth[list(res.selected).index(iv.coef_index)])


def result_rows(scenario, results: Sequence[IterationResult], settings: SimSettings) -> List[dict]:
    """Long-format rows: one per (result, coefficient), selected or not."""
    desc = scenario.describe()
    beta0 = scenario.beta
    rows = []
    for res in results:
        by_coef = {iv.coef_index: iv for iv in res.intervals}
        ptrue = p_true(res.selected, beta0)
        for j in range(scenario.p):
            iv = by_coef.get(j)
            row = {
                "scenario_id": res.scenario_id, "n": desc["n"], "p": scenario.p,
                "rho": desc["rho"], "censor_target": desc["censor_target"],
                "baseline": _baseline_label(scenario), "pattern": desc["pattern"],
                "lasso_flavor": res.lasso_flavor, "method": res.method, "tuning": res.tuning,
                "iteration": res.iteration, "coef_index": j, "selected": int(j in res.selected),
                "runtime_seconds": res.runtime_seconds if settings.record_runtime else None,
                "model_size": res.model_size, "p_true": ptrue, "ibs": res.ibs, "cindex": res.cindex,
                "flags": _flags_text(res.fit_flags),
            }
            if iv is not None:
                tv = _target_value(scenario, res, iv, settings.truth_n_pop)
                row.update(
                    estimate=iv.estimate, lower=iv.lower, upper=iv.upper, degenerate=int(iv.degenerate),
                    target_kind=iv.target_kind, target_value=tv,
                    covered=None if iv.degenerate else int(iv.contains(tv)),
                    rejected_zero=None if iv.degenerate else int(not iv.contains(0.0)),
                )
            rows.append(row)
    return rows


def _sort_key(row):
    return (row["scenario_id"], int(row["iteration"]), row["method"], row["lasso_flavor"],
            row["tuning"], int(row["coef_index"]))


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="raise")
    w.writeheader()
    for row in rows:
        w.writerow({c: _fmt(row.get(c)) for c in columns})
    return buf.getvalue()


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(text: str) -> float:
    return float(text) if text != "" else float("nan")


def parse_long_row(row: dict) -> dict:
    """Typed view of a long CSV row; :func:`rows_to_csv` writes it back unchanged."""
    out = dict(row)
    for k in ("n", "p", "iteration", "coef_index", "selected", "model_size"):
        out[k] = int(row[k])
    for k in ("estimate", "lower", "upper", "target_value", "runtime_seconds", "p_true", "ibs", "cindex"):
        out[k] = None if row[k] == "" else float(row[k])
    for k in ("degenerate", "covered", "rejected_zero"):
        out[k] = None if row[k] == "" else int(row[k])
    out["rho"] = "" if row["rho"] == "" else float(row["rho"])
    out["censor_target"] = float(row["censor_target"])
    return out


def results_from_rows(rows: Sequence[dict]):
    """Rebuild IterationResults and the TargetTable from long-format rows."""
    groups: Dict[tuple, list] = {}
    for row in rows:
        key = (row["scenario_id"], row["lasso_flavor"], row["method"], row["tuning"], int(row["iteration"]))
        groups.setdefault(key, []).append(row)
    results, targets = [], TargetTable()
    for key in sorted(groups):
        sid, flavor, method, tuning, it = key
        grp = sorted(groups[key], key=lambda r: int(r["coef_index"]))
        selected = tuple(int(r["coef_index"]) for r in grp if int(r["selected"]))
        ivs = []
        for r in grp:
            if r["estimate"] == "":
                continue
            iv = SelectiveInterval(int(r["coef_index"]), float(r["estimate"]), float(r["lower"]),
                                   float(r["upper"]), 0.5, r["target_kind"], method, bool(int(r["degenerate"])))
            ivs.append(iv)
            if r["target_kind"] == "submodel":
                targets.set_value(sid, selected, iv.coef_index, float(r["target_value"]))
        first = grp[0]
        runtime = _num(first["runtime_seconds"])
        results.append(IterationResult(
            sid, method, tuning, it, selected, ivs, 0.0 if np.isnan(runtime) else runtime,
            _parse_flags(first["flags"]), flavor, _num(first["ibs"]), _num(first["cindex"])))
    return results, targets


SUMMARY_COLUMNS = [
    "scenario_id", "lasso_flavor", "method", "tuning", "coef_index",
    "coverage", "coverage_se", "coverage_count", "degenerate",
    "median_width", "iqr_width", "mean_width", "width_count", "width_excluded",
    "power", "power_se", "power_count", "type1", "type1_se", "type1_count",
    "mean_model_size", "mean_p_true", "empty_selections", "tpr", "fpr",
    "mean_ibs", "mean_cindex", "replicates", "failed", "failure_rate", "degenerate_rate", "flagged",
]


def summarize(results: Sequence[IterationResult], targets: TargetTable, truth: Dict[str, np.ndarray]) -> List[dict]:
    """Per-coefficient and pooled rows for every cell."""
    for sid, b in truth.items():
        targets.set_full(sid, b)
    rows: Dict[tuple, dict] = {}

    def merge(items, rename=None):
        for r in items:
            key = (r["scenario_id"], r["lasso_flavor"], r["method"], r["tuning"], str(r["coef_index"]))
            dest = rows.setdefault(key, {k: r[k] for k in ("scenario_id", "lasso_flavor", "method", "tuning", "coef_index")})
            for k, v in r.items():
                if k in dest and k in ("scenario_id", "lasso_flavor", "method", "tuning", "coef_index"):
                    continue
                dest[(rename or {}).get(k, k)] = v

    merge(selective_coverage(results, targets), {"rate": "coverage", "mc_se": "coverage_se", "count": "coverage_count"})
    merge(sci_width(results), {"count": "width_count", "excluded": "width_excluded"})
    merge(selective_power_type1(results, truth))
    merge(selection_quality(results, truth), {"replicates": "_replicates"})
    merge(failure_summary(results))
    pred = {}
    for r in results:
        pred.setdefault(r.cell, []).append((r.ibs, r.cindex))
    for cell, vals in pred.items():
        a = np.array(vals, float)
        key = cell + (POOLED,)
        dest = rows.setdefault(key, dict(zip(("scenario_id", "lasso_flavor", "method", "tuning", "coef_index"), key)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            dest["mean_ibs"] = float(np.nanmean(a[:, 0])) if np.isfinite(a[:, 0]).any() else float("nan")
            dest["mean_cindex"] = float(np.nanmean(a[:, 1])) if np.isfinite(a[:, 1]).any() else float("nan")

    def order(key):
        coef = key[4]
        return key[:4] + ((1, 0) if coef == POOLED else (0, int(coef)),)

    return [rows[k] for k in sorted(rows, key=order)]


# --- driver ----------------------------------------------------------------------

def _task(args):
    scenario, settings, iteration = args
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        results = run_iteration(scenario, settings, iteration)
        rows = result_rows(scenario, results, settings)
    runtimes = [(r.scenario_id, r.iteration, r.method, r.lasso_flavor, r.tuning, r.runtime_seconds) for r in results]
    return rows, runtimes


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _load_manifest(path: Path, grid: ScenarioGrid) -> dict:
    if path.exists():
        man = json.loads(path.read_text())
        if man.get("config_hash") == grid.config_hash():
            return man
        log.warning("manifest belongs to a different config; starting over")
    return {
        "config_hash": grid.config_hash(), "seed": grid.base_seed, "version": __version__,
        "n_sim": grid.n_sim, "scenarios": {s.scenario_id: {"status": "pending"} for s in grid.scenarios},
    }


def run_simulation(grid: ScenarioGrid, threads: int = 1, out_dir=".", progress: bool = False) -> dict:
    """Run every pending scenario, then write ``long.csv`` and ``summary.csv``.

    Returns the paths of the written files.
    """
    out = Path(out_dir)
    parts = out / "parts"
    parts.mkdir(parents=True, exist_ok=True)
    man_path = out / "manifest.json"
    manifest = _load_manifest(man_path, grid)
    _write_atomic(man_path, json.dumps(manifest, indent=2, sort_keys=True))
    settings = grid.settings
    pool = ProcessPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for scenario in grid.scenarios:
            sid = scenario.scenario_id
            part = parts / f"{sid}.csv"
            if manifest["scenarios"].get(sid, {}).get("status") == "complete" and part.exists():
                continue
            t0 = time.time()
            tasks = [(scenario, settings, it) for it in range(grid.n_sim)]
            mapped = pool.map(_task, tasks, chunksize=max(1, grid.n_sim // (4 * threads))) if pool else map(_task, tasks)
            rows, runtimes = [], []
            for r, rt in mapped:
                rows.extend(r)
                runtimes.extend(rt)
            rows.sort(key=_sort_key)
            _write_atomic(part, rows_to_csv(rows, LONG_COLUMNS))
            runtimes.sort()
            _write_atomic(parts / f"{sid}.runtimes.csv", rows_to_csv(
                [dict(zip(("scenario_id", "iteration", "method", "lasso_flavor", "tuning", "runtime_seconds"), r))
                 for r in runtimes],
                ["scenario_id", "iteration", "method", "lasso_flavor", "tuning", "runtime_seconds"]))
            manifest["scenarios"][sid] = {"status": "complete", "wall_seconds": round(time.time() - t0, 3)}
            _write_atomic(man_path, json.dumps(manifest, indent=2, sort_keys=True))
            if progress:
                log.info("finished %s in %.1fs", sid, time.time() - t0)
    finally:
        if pool is not None:
            pool.shutdown()
    return finalize(grid, out)


def finalize(grid: ScenarioGrid, out_dir) -> dict:
    """Concatenate part files into ``long.csv`` and aggregate ``summary.csv``."""
    out = Path(out_dir)
    all_rows = []
    for scenario in sorted(grid.scenarios, key=lambda s: s.scenario_id):
        all_rows.extend(read_csv(out / "parts" / f"{scenario.scenario_id}.csv"))
    long_path = out / "long.csv"
    _write_atomic(long_path, rows_to_csv(all_rows, LONG_COLUMNS))
    results, targets = results_from_rows(all_rows)
    truth = {s.scenario_id: s.beta for s in grid.scenarios}
    summary = summarize(results, targets, truth)
    summary_path = out / "summary.csv"
    _write_atomic(summary_path, rows_to_csv(summary, SUMMARY_COLUMNS))
    runtime_rows = []
    for scenario in sorted(grid.scenarios, key=lambda s: s.scenario_id):
        runtime_rows.extend(read_csv(out / "parts" / f"{scenario.scenario_id}.runtimes.csv"))
    runtime_path = out / "runtimes.csv"
    if runtime_rows:
        _write_atomic(runtime_path, rows_to_csv(runtime_rows, list(runtime_rows[0])))
    return {"long": long_path, "summary": summary_path, "runtimes": runtime_path, "manifest": out / "manifest.json"}
