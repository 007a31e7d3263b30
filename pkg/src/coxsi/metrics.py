"""Performance measures for simulation replicates and prediction quality.

Selective measures are computed from :class:`IterationResult` records and a
:class:`TargetTable` of true coefficients.  Cells are keyed by
``(scenario_id, lasso_flavor, method, tuning)`` and every aggregate is emitted
both per coefficient and pooled over the coefficients of a cell.  Reductions
iterate over sorted keys so the output does not depend on the order in which
results arrive.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .inference import SelectiveInterval
from .survival_core import SurvivalDataset

POOLED = "pooled"
FAILURE_FLAG_RATE = 0.2


@dataclass
class IterationResult:
    scenario_id: str
    method: str
    tuning: str
    iteration: int
    selected: tuple
    intervals: List[SelectiveInterval]
    runtime_seconds: float = 0.0
    fit_flags: Dict[str, int] = field(default_factory=dict)
    lasso_flavor: str = "standard"
    ibs: float = float("nan")
    cindex: float = float("nan")

    def __post_init__(self):
        self.selected = tuple(sorted(int(j) for j in self.selected))
        if self.runtime_seconds < 0:
            raise ValueError("runtime must be nonnegative")
        if self.method not in ("full", "debiased"):
            extra = {iv.coef_index for iv in self.intervals} - set(self.selected)
            if extra:
                raise ValueError(f"{self.method} reports intervals outside the selected set: {sorted(extra)}")

    @property
    def model_size(self) -> int:
        return len(self.selected)

    @property
    def cell(self) -> tuple:
        return (self.scenario_id, self.lasso_flavor, self.method, self.tuning)

    @property
    def failed(self) -> bool:
        return bool(self.fit_flags.get("failed", 0))


class TargetTable:
    """True coefficients per scenario: the full vector and submodel projections."""

    def __init__(self):
        self._full: Dict[str, np.ndarray] = {}
        self._sub: Dict[tuple, Dict[int, float]] = {}

    def set_full(self, scenario_id: str, beta0) -> None:
        self._full[scenario_id] = np.asarray(beta0, float).copy()

    def set_submodel(self, scenario_id: str, subset, values) -> None:
        subset = tuple(int(j) for j in subset)
        values = np.atleast_1d(np.asarray(values, float))
        if len(values) != len(subset):
            raise ValueError("one value per subset member required")
        self._sub.setdefault((scenario_id, subset), {}).update(zip(subset, values.tolist()))

    def set_value(self, scenario_id: str, subset, coef: int, value: float) -> None:
        self._sub.setdefault((scenario_id, tuple(subset)), {})[int(coef)] = float(value)

    def has_submodel(self, scenario_id: str, subset) -> bool:
        return (scenario_id, tuple(subset)) in self._sub

    def full(self, scenario_id: str) -> np.ndarray:
        return self._full[scenario_id]

    def value(self, scenario_id: str, target_kind: str, subset, coef: int) -> float:
        if target_kind == "full_model":
            return float(self._full[scenario_id][coef])
        try:
            return self._sub[(scenario_id, tuple(subset))][int(coef)]
        except KeyError:
            raise KeyError(f"no submodel target for {scenario_id} subset {tuple(subset)} coef {coef}") from None

    def target_for(self, result: IterationResult, interval: SelectiveInterval) -> float:
        return self.value(result.scenario_id, interval.target_kind, result.selected, interval.coef_index)


def _rate_row(hits: int, count: int) -> dict:
    if count == 0:
        return {"rate": float("nan"), "mc_se": float("nan"), "count": 0}
    r = hits / count
    return {"rate": r, "mc_se": math.sqrt(r * (1 - r) / count), "count": count}


def _grouped(results: Iterable[IterationResult]):
    cells = defaultdict(list)
    for res in results:
        cells[res.cell].append(res)
    for key in sorted(cells):
        yield key, sorted(cells[key], key=lambda r: r.iteration)


def _cell_dict(key, coef):
    sid, flavor, method, tuning = key
    return {"scenario_id": sid, "lasso_flavor": flavor, "method": method, "tuning": tuning, "coef_index": coef}


def selective_coverage(results: Iterable[IterationResult], targets: TargetTable) -> List[dict]:
    """Share of non-degenerate reported intervals that contain their target.

    One row per coefficient plus a pooled row per cell.  ``degenerate``
    counts the intervals left out.
    """
    rows = []
    for key, group in _grouped(results):
        per = defaultdict(lambda: [0, 0, 0])
        for res in group:
            for iv in res.intervals:
                slot = per[iv.coef_index]
                if iv.degenerate:
                    slot[2] += 1
                    continue
                slot[0] += iv.contains(targets.target_for(res, iv))
                slot[1] += 1
        total = [sum(v[i] for v in per.values()) for i in range(3)]
        for coef in sorted(per) + [POOLED]:
            h, c, d = total if coef == POOLED else per[coef]
            rows.append({**_cell_dict(key, coef), **_rate_row(h, c), "degenerate": d})
    return rows


def sci_width(results: Iterable[IterationResult]) -> List[dict]:
    """Median and interquartile range of finite, non-degenerate interval widths."""
    rows = []
    for key, group in _grouped(results):
        per = defaultdict(list)
        excluded = defaultdict(int)
        for res in group:
            for iv in res.intervals:
                if iv.degenerate or not np.isfinite(iv.width):
                    excluded[iv.coef_index] += 1
                else:
                    per[iv.coef_index].append(iv.width)
        coefs = sorted(set(per) | set(excluded))
        for coef in coefs + [POOLED]:
            w = np.array([x for c in coefs for x in per[c]] if coef == POOLED else per[coef])
            n_ex = sum(excluded.values()) if coef == POOLED else excluded[coef]
            if w.size:
                q1, med, q3 = np.quantile(w, [0.25, 0.5, 0.75])
                stats = {"median_width": float(med), "iqr_width": float(q3 - q1), "mean_width": float(w.mean())}
            else:
                stats = {"median_width": float("nan"), "iqr_width": float("nan"), "mean_width": float("nan")}
            rows.append({**_cell_dict(key, coef), **stats, "count": int(w.size), "excluded": int(n_ex)})
    return rows


def selective_power_type1(results: Iterable[IterationResult], truth: Dict[str, np.ndarray]) -> List[dict]:
    """Rejection rates of ``beta_j = 0`` (zero outside the interval) split by the true coefficient.

    ``truth`` maps scenario ids to the full coefficient vector.
    """
    rows = []
    for key, group in _grouped(results):
        beta0 = np.asarray(truth[key[0]], float)
        per = defaultdict(lambda: [0, 0])
        for res in group:
            for iv in res.intervals:
                if iv.degenerate:
                    continue
                slot = per[iv.coef_index]
                slot[0] += not iv.contains(0.0)
                slot[1] += 1
        for coef in sorted(per) + [POOLED]:
            if coef == POOLED:
                act = [per[c] for c in per if beta0[c] != 0]
                null = [per[c] for c in per if beta0[c] == 0]
                pw = _rate_row(sum(a[0] for a in act), sum(a[1] for a in act))
                t1 = _rate_row(sum(a[0] for a in null), sum(a[1] for a in null))
            else:
                r = _rate_row(*per[coef])
                empty = _rate_row(0, 0)
                pw, t1 = (r, empty) if beta0[coef] != 0 else (empty, r)
            rows.append({
                **_cell_dict(key, coef),
                "power": pw["rate"], "power_se": pw["mc_se"], "power_count": pw["count"],
                "type1": t1["rate"], "type1_se": t1["mc_se"], "type1_count": t1["count"],
            })
    return rows


def p_true(selected: Sequence[int], beta0) -> float:
    if len(selected) == 0:
        return float("nan")
    active = set(np.flatnonzero(np.asarray(beta0) != 0).tolist())
    return len(active.intersection(selected)) / len(selected)


def selection_quality(results: Iterable[IterationResult], truth: Dict[str, np.ndarray]) -> List[dict]:
    """Mean model size, mean P_true and selection rates of active and inactive covariates per cell."""
    rows = []
    for key, group in _grouped(results):
        beta0 = np.asarray(truth[key[0]], float)
        active = beta0 != 0
        sizes, ptrue, tpr, fpr = [], [], [], []
        for res in group:
            if res.failed:
                continue
            sel = np.zeros(len(beta0), bool)
            sel[list(res.selected)] = True
            sizes.append(sel.sum())
            ptrue.append(p_true(res.selected, beta0))
            if active.any():
                tpr.append(sel[active].mean())
            if (~active).any():
                fpr.append(sel[~active].mean())
        pt = np.array(ptrue, float)
        defined = pt[~np.isnan(pt)]
        nanmean = lambda a: float(np.mean(a)) if len(a) else float("nan")
        rows.append({
            **_cell_dict(key, POOLED),
            "mean_model_size": nanmean(sizes),
            "mean_p_true": nanmean(defined),
            "empty_selections": int(np.isnan(pt).sum()),
            "tpr": nanmean(tpr), "fpr": nanmean(fpr), "replicates": len(sizes),
        })
    return rows


def failure_summary(results: Iterable[IterationResult]) -> List[dict]:
    """Failed replicates per cell; cells above the failure threshold are flagged."""
    rows = []
    for key, group in _grouped(results):
        failed = sum(r.failed for r in group)
        deg = sum(iv.degenerate for r in group for iv in r.intervals)
        n_iv = sum(len(r.intervals) for r in group)
        rate = failed / len(group)
        rows.append({
            **_cell_dict(key, POOLED), "replicates": len(group), "failed": failed,
            "failure_rate": rate, "degenerate_rate": deg / n_iv if n_iv else float("nan"),
            "flagged": int(rate > FAILURE_FLAG_RATE),
        })
    return rows


# --- prediction measures -----------------------------------------------------

@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function equal to 1 before the first jump."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, float)
        if self.times.size == 0:
            return np.ones_like(t)
        idx = np.searchsorted(self.times, t, side="right")
        return np.where(idx == 0, 1.0, self.values[np.maximum(idx - 1, 0)])

    def left(self, t):
        """Left limit ``G(t-)``."""
        t = np.asarray(t, float)
        if self.times.size == 0:
            return np.ones_like(t)
        idx = np.searchsorted(self.times, t, side="left")
        return np.where(idx == 0, 1.0, self.values[np.maximum(idx - 1, 0)])


def km_censoring_survivor(data: SurvivalDataset) -> StepFunction:
    """Kaplan-Meier estimate of the censoring survivor function (censorings are the events)."""
    order = np.argsort(data.time, kind="stable")
    t = data.time[order]
    cens = 1 - data.status[order]
    at_risk = len(t) - np.arange(len(t))
    factors = np.where(cens == 1, 1.0 - 1.0 / at_risk, 1.0)
    surv = np.cumprod(factors)
    jumps = cens == 1
    return StepFunction(t[jumps], surv[jumps])


def brier_score(t: float, time, status, surv_t, G: StepFunction, left_limit: bool = False) -> float:
    """IPCW Brier score at ``t`` given predicted ``S(t|x_i)`` for every subject.

    With ``left_limit`` the score is the limit from the left, where subjects
    with ``Y_i = t`` still count as at risk.
    """
    time = np.asarray(time, float)
    if left_limit:
        died = (time < t) & (status == 1)
        alive = time >= t
        g_t = float(G.left(t))
    else:
        died = (time <= t) & (status == 1)
        alive = time > t
        g_t = float(G(t))
    g_y = G.left(time)
    term1 = np.where(died, surv_t ** 2 / np.where(died, g_y, 1.0), 0.0)
    term2 = np.where(alive, (1 - surv_t) ** 2 / g_t if g_t > 0 else 0.0, 0.0)
    return float(np.mean(term1 + term2))


def _brier_curve(pts, data, surv, G, left_limit):
    """Vectorised :func:`brier_score` over the columns of ``surv``."""
    y = data.time[:, None]
    event = (data.status == 1)[:, None]
    if left_limit:
        died, alive, g_t = (y < pts) & event, y >= pts, G.left(pts)
    else:
        died, alive, g_t = (y <= pts) & event, y > pts, G(pts)
    g_y = G.left(data.time)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        term1 = np.where(died, surv ** 2 / g_y, 0.0)
        term2 = np.where(alive & (g_t > 0), (1 - surv) ** 2 / g_t, 0.0)
    return (term1 + term2).mean(axis=0)


def brier_horizon(time, G: StepFunction, quantile: float = 0.9, min_g: float = 0.05):
    """Default horizon and whether it had to be pulled back because ``G`` got too small."""
    time = np.asarray(time, float)
    tau = float(np.quantile(time, quantile))
    if float(G(tau)) > min_g:
        return tau, False
    low = G.times[G.values <= min_g][0]
    earlier = time[time < low]
    if earlier.size == 0:
        raise ValueError("censoring survivor is too small at every observed time")
    return float(earlier.max()), True


def integrated_brier(data_test: SurvivalDataset, survival_model: Callable, grid=None,
                     G: Optional[StepFunction] = None, tau: Optional[float] = None,
                     n_grid: int = 100, info: Optional[dict] = None) -> float:
    """Integrated IPCW Brier score over ``[0, tau]`` divided by ``tau``.

    ``survival_model(times)`` returns the ``n x len(times)`` matrix of
    predicted survival probabilities for the test subjects.  The trapezoid
    rule runs over ``grid`` (default ``n_grid`` equispaced points) refined by
    the observed test times, where the Brier score jumps; at those points
    both one-sided limits enter.
    """
    G = km_censoring_survivor(data_test) if G is None else G
    truncated = False
    if tau is None:
        tau, truncated = brier_horizon(data_test.time, G) if grid is None else (float(np.max(grid)), False)
    if grid is None:
        grid = np.linspace(0.0, tau, n_grid)
    grid = np.asarray(grid, float)
    grid = grid[(grid >= 0) & (grid <= tau)]
    jumps = np.unique(data_test.time[(data_test.time > 0) & (data_test.time < tau)])
    pts = np.union1d(np.union1d(grid, jumps), [0.0, tau])
    surv = np.clip(np.asarray(survival_model(pts), float), 0.0, 1.0)
    bs_right = _brier_curve(pts, data_test, surv, G, left_limit=False)
    bs_left = bs_right.copy()
    is_jump = np.isin(pts, jumps)
    if is_jump.any():
        bs_left[is_jump] = _brier_curve(pts[is_jump], data_test, surv[:, is_jump], G, left_limit=True)
    # segment [pts[k], pts[k+1]] uses the right value at its start and the left value at its end
    area = 0.5 * np.sum(np.diff(pts) * (bs_right[:-1] + bs_left[1:]))
    if info is not None:
        info.update(tau=tau, truncated=truncated)
    return float(np.clip(area / tau, 0.0, 1.0))


def harrell_cindex(data_test: SurvivalDataset, risk_scores, chunk: int = 2048) -> float:
    """Harrell's concordance: higher risk should mean earlier event; tied risks count one half."""
    risk = np.asarray(risk_scores, float)
    if risk.shape != (data_test.n,):
        raise ValueError("one risk score per subject required")
    t, d = data_test.time, data_test.status
    events = np.flatnonzero(d == 1)
    conc = 0.0
    comparable = 0
    for start in range(0, len(events), chunk):
        i = events[start:start + chunk]
        later = t[None, :] > t[i, None]
        comparable += int(later.sum())
        diff = risk[i, None] - risk[None, :]
        conc += float(((diff > 0) & later).sum()) + 0.5 * float(((diff == 0) & later).sum())
    if comparable == 0:
        return float("nan")
    return conc / comparable
