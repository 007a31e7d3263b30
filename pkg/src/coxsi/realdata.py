"""Subsampling stability analysis on a real survival dataset."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .datagen import break_ties, calibrate_from_dataset, clean_design
from .inference import (
    SelectionEvent,
    estimate_nodewise_inverse,
    infer_debiased,
    infer_exact_psi,
    infer_full,
    infer_refit,
    infer_refit0,
    infer_split,
)
from .penalized import SelectionSpec, select_model
from .survival_core import SurvivalDataset, fit_cox_mle

REAL_METHODS = ("full", "refit", "refit0", "split", "debiased", "exact_psi")
_TYPES = ("num", "bin", "cat")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str = "num"
    levels: Optional[tuple] = None


def parse_covariates(spec: str) -> list:
    """Parse ``"age:num,er:bin,grade:cat[1|2|3]"``.

    A type defaults to ``num``.  Declared levels of a categorical variable fix
    the reference (first) level and make unseen values an error.
    """
    out = []
    for item in filter(None, (s.strip() for s in spec.split(","))):
        m = re.fullmatch(r"([^:\[\]]+)(?::(\w+))?(?:\[([^\]]*)\])?", item)
        if not m:
            raise SchemaError(f"cannot parse covariate spec {item!r}")
        name, kind, levels = m.group(1).strip(), m.group(2) or "num", m.group(3)
        if kind not in _TYPES:
            raise SchemaError(f"covariate {name!r}: unknown type {kind!r} (use one of {_TYPES})")
        if levels is not None and kind != "cat":
            raise SchemaError(f"covariate {name!r}: levels are only allowed for cat")
        out.append(CovariateSpec(name, kind, tuple(levels.split("|")) if levels else None))
    if not out:
        raise SchemaError("no covariates given")
    return out


def design_from_frame(df: pd.DataFrame, time_col: str, event_col: str, covariates: Sequence[CovariateSpec]):
    """Validate columns and build ``(time, status, X, names)``; categoricals drop their first level."""
    missing = [c for c in [time_col, event_col] + [c.name for c in covariates] if c not in df.columns]
    if missing:
        raise SchemaError(f"missing columns: {missing}")
    for col in [time_col, event_col] + [c.name for c in covariates]:
        bad = df[col].isna().to_numpy().nonzero()[0]
        if bad.size:
            raise SchemaError(f"column {col!r}: missing value in row {int(bad[0]) + 1}")
    time = pd.to_numeric(df[time_col], errors="coerce").to_numpy(float)
    bad = np.flatnonzero(~(time > 0))
    if bad.size:
        raise SchemaError(f"column {time_col!r}: non-positive or non-numeric time in row {int(bad[0]) + 1}")
    status = pd.to_numeric(df[event_col], errors="coerce").to_numpy(float)
    bad = np.flatnonzero(~np.isin(status, (0.0, 1.0)))
    if bad.size:
        raise SchemaError(f"column {event_col!r}: event indicator must be 0/1 (row {int(bad[0]) + 1})")
    cols, names = [], []
    for cov in covariates:
        raw = df[cov.name]
        if cov.kind == "cat":
            values = raw.astype(str).to_numpy()
            levels = cov.levels if cov.levels is not None else tuple(sorted(set(values)))
            unknown = np.flatnonzero(~np.isin(values, levels))
            if unknown.size:
                r = int(unknown[0])
                raise SchemaError(f"column {cov.name!r}: unknown category {values[r]!r} in row {r + 1}")
            for lev in levels[1:]:
                cols.append((values == lev).astype(float))
                names.append(f"{cov.name}={lev}")
            continue
        x = pd.to_numeric(raw, errors="coerce").to_numpy(float)
        bad = np.flatnonzero(~np.isfinite(x))
        if bad.size:
            raise SchemaError(f"column {cov.name!r}: non-numeric value in row {int(bad[0]) + 1}")
        if cov.kind == "bin" and not np.all(np.isin(x, (0.0, 1.0))):
            r = int(np.flatnonzero(~np.isin(x, (0.0, 1.0)))[0])
            raise SchemaError(f"column {cov.name!r}: binary covariate has value {x[r]!r} in row {r + 1}")
        cols.append(x)
        names.append(cov.name)
    return time, status.astype(int), np.column_stack(cols), names


def load_real(path, time_col: str, event_col: str, covariates, rare_threshold: float = 0.01) -> SurvivalDataset:
    """Read, validate, dummy-encode and clean a CSV; tied times are broken by jittering."""
    covs = parse_covariates(covariates) if isinstance(covariates, str) else list(covariates)
    df = pd.read_csv(path)
    time, status, X, names = design_from_frame(df, time_col, event_col, covs)
    X, names, _ = clean_design(X, names, rare_threshold)
    if X.shape[1] == 0:
        raise SchemaError("no covariates left after cleaning")
    return SurvivalDataset(break_ties(time, status), status, X, names=tuple(names))


@dataclass
class RealDataReport:
    frequencies: pd.DataFrame
    intervals: pd.DataFrame
    order: list

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"frequencies": out / "selection_frequencies.csv", "intervals": out / "intervals.csv"}
        self.frequencies.to_csv(paths["frequencies"], index=False, float_format="%.10g", lineterminator="\n")
        self.intervals.to_csv(paths["intervals"], index=False, float_format="%.10g", lineterminator="\n")
        return paths


def _method_intervals(method, data, sel, spec, alpha, rng, nodewise_c):
    fit = sel.fit
    if method == "full":
        return tuple(range(data.p)), infer_full(data, alpha)
    if method == "refit":
        return tuple(fit.active), infer_refit(data, SelectionEvent.from_fit(fit, sel.weights), alpha)
    if method == "refit0":
        return tuple(fit.active), infer_refit0(data, fit, alpha)
    if method == "exact_psi":
        return tuple(fit.active), infer_exact_psi(data, fit, alpha, weights=sel.weights)
    if method == "debiased":
        nw = estimate_nodewise_inverse(data, fit.beta, c=nodewise_c)
        keep = set(fit.active.tolist())
        return tuple(fit.active), [iv for iv in infer_debiased(data, fit, nw, alpha) if iv.coef_index in keep]
    if method == "split":
        ev, ivs, _ = infer_split(data, spec, alpha, rng)
        return tuple(ev.active), ivs
    raise ValueError(f"unknown method {method!r} (choose from {REAL_METHODS})")


def analyze_real(data: SurvivalDataset, n_subsamples: int = 100, subsample_fraction: float = 0.8,
                 methods: Sequence[str] = ("refit", "split", "debiased", "exact_psi"),
                 spec: Optional[SelectionSpec] = None, alpha: float = 0.1, seed: int = 1,
                 nodewise_c: float = 1.0) -> RealDataReport:
    """Selection frequencies and per-subsample intervals over random subsamples without replacement.

    Covariates are ordered by their signed standardised coefficient in the
    unpenalised full-data fit.  Frequencies are percentages of subsamples in
    which the Lasso selected the covariate.
    """
    if not 0 < subsample_fraction <= 1:
        raise ValueError("subsample_fraction must lie in (0, 1]")
    spec = SelectionSpec() if spec is None else spec
    std = data.standardize()
    names = list(data.names) if data.names else [f"X{j + 1}" for j in range(data.p)]
    ref = fit_cox_mle(std)
    order = list(np.argsort(ref.beta, kind="stable"))
    m = max(2, int(round(subsample_fraction * data.n)))
    counts = np.zeros(data.p, int)
    rows = []
    for s in range(n_subsamples):
        rng = np.random.default_rng(np.random.SeedSequence([seed, s]))
        idx = np.sort(rng.choice(data.n, size=m, replace=False))
        sub = data.subset_rows(idx).standardize()
        sel = select_model(sub, spec, rng)
        counts[sel.fit.active] += 1
        for method in methods:
            try:
                selected, ivs = _method_intervals(method, sub, sel, spec, alpha, rng, nodewise_c)
            except Exception as exc:
                rows.append({"subsample": s, "method": method, "variable": "", "coef_index": -1,
                             "estimate": np.nan, "lower": np.nan, "upper": np.nan, "degenerate": 1,
                             "lambda": sel.lam, "flags": f"failed={type(exc).__name__}"})
                continue
            for iv in ivs:
                rows.append({"subsample": s, "method": method, "variable": names[iv.coef_index],
                             "coef_index": iv.coef_index, "estimate": iv.estimate, "lower": iv.lower,
                             "upper": iv.upper, "degenerate": int(iv.degenerate), "lambda": sel.lam, "flags": ""})
    rank = {j: k for k, j in enumerate(order)}
    freq = pd.DataFrame({
        "variable": [names[j] for j in order],
        "coef_index": order,
        "std_effect": [ref.beta[j] for j in order],
        "selected": [int(counts[j]) for j in order],
        "frequency_pct": [100.0 * counts[j] / n_subsamples for j in order],
    })
    iv = pd.DataFrame(rows, columns=["subsample", "method", "variable", "coef_index", "estimate",
                                     "lower", "upper", "degenerate", "lambda", "flags"])
    if not iv.empty:
        iv["_rank"] = iv["coef_index"].map(lambda j: rank.get(j, -1))
        iv = iv.sort_values(["_rank", "method", "subsample"], kind="mergesort").drop(columns="_rank")
        iv = iv.reset_index(drop=True)
    return RealDataReport(freq, iv, [names[j] for j in order])


def export_calibrated(data: SurvivalDataset, path, label: str = "calibrated", rare_threshold: float = 0.01):
    scenario = calibrate_from_dataset(data, rare_threshold, label)
    Path(path).write_text(json.dumps(scenario.to_json()))
    return scenario
