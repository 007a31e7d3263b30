import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from coxsi.inference import SelectiveInterval, infer_full, infer_oracle
from coxsi.metrics import (
    POOLED,
    IterationResult,
    StepFunction,
    TargetTable,
    brier_score,
    failure_summary,
    harrell_cindex,
    integrated_brier,
    km_censoring_survivor,
    p_true,
    sci_width,
    selection_quality,
    selective_coverage,
    selective_power_type1,
)
from coxsi.survival_core import SurvivalDataset

from _oracles import random_dataset


def _iv(j, lo, hi, degenerate=False, kind="submodel", method="refit"):
    return SelectiveInterval(j, 0.5 * (lo + hi) if np.isfinite(lo + hi) else 0.0, lo, hi, 0.1, kind, method, degenerate)


def _res(it, selected, intervals, method="refit", sid="s", **kw):
    return IterationResult(sid, method, "cv_min", it, tuple(selected), intervals, **kw)


def _pooled(rows):
    return [r for r in rows if r["coef_index"] == POOLED]


def _targets(beta0, sid="s"):
    t = TargetTable()
    t.set_full(sid, beta0)
    return t


def test_coverage_trivial_cases():
    t = _targets([1.0, 0.0])
    t.set_submodel("s", (0, 1), [1.0, 0.0])
    wide = [_res(i, (0, 1), [_iv(0, -np.inf, np.inf), _iv(1, -np.inf, np.inf)]) for i in range(5)]
    (row,) = _pooled(selective_coverage(wide, t))
    assert row["rate"] == 1.0 and row["count"] == 10
    miss = [_res(i, (0, 1), [_iv(0, 5, 6), _iv(1, 5, 6)]) for i in range(5)]
    assert _pooled(selective_coverage(miss, t))[0]["rate"] == 0.0


def test_coverage_excludes_degenerate_and_handles_empty():
    t = _targets([1.0])
    t.set_submodel("s", (0,), [1.0])
    res = [_res(0, (0,), [_iv(0, 0, 2)]), _res(1, (0,), [_iv(0, -np.inf, np.inf, degenerate=True)])]
    row = _pooled(selective_coverage(res, t))[0]
    assert row["count"] == 1 and row["degenerate"] == 1 and row["rate"] == 1.0
    only_deg = [_res(1, (0,), [_iv(0, -np.inf, np.inf, degenerate=True)])]
    row = _pooled(selective_coverage(only_deg, t))[0]
    assert row["count"] == 0 and math.isnan(row["rate"])


def test_coverage_full_model_wald_sparse():
    rng = np.random.default_rng(21)
    beta0 = np.r_[1.0, 1.0, np.zeros(8)]
    t = _targets(beta0)
    res = []
    for it in range(500):
        data = random_dataset(rng, 400, 10, censor=0.0, beta=beta0)
        res.append(_res(it, range(10), infer_full(data), method="full"))
    assert 0.87 <= _pooled(selective_coverage(res, t))[0]["rate"] <= 0.93


def test_oracle_coverage_large_n():
    rng = np.random.default_rng(22)
    beta0 = np.r_[0.8, 0.7, 0.5, 0.8, np.zeros(6)]
    t = _targets(beta0)
    t.set_submodel("s", (0, 1, 2, 3), beta0[:4])
    res = [
        _res(it, (0, 1, 2, 3), infer_oracle(random_dataset(rng, 800, 10, censor=0.0, beta=beta0), [0, 1, 2, 3]),
             method="oracle")
        for it in range(200)
    ]
    assert abs(_pooled(selective_coverage(res, t))[0]["rate"] - 0.90) <= 0.05


def test_aggregation_order_independent():
    rng = np.random.default_rng(3)
    t = _targets([1.0, 0.0, 0.5])
    t.set_submodel("s", (0, 2), [1.0, 0.5])
    res = []
    for it in range(30):
        lo = rng.normal(size=2)
        res.append(_res(it, (0, 2), [_iv(0, lo[0], lo[0] + 1.5), _iv(2, lo[1], lo[1] + 1.0)]))
    shuffled = [res[i] for i in rng.permutation(len(res))]
    for fn in (lambda r: selective_coverage(r, t), sci_width, lambda r: selective_power_type1(r, {"s": t.full("s")})):
        a, b = fn(res), fn(shuffled)
        assert len(a) == len(b)
        for ra, rb in zip(a, b):
            assert ra.keys() == rb.keys()
            for k in ra:
                same_nan = isinstance(ra[k], float) and math.isnan(ra[k]) and math.isnan(rb[k])
                assert same_nan or ra[k] == rb[k], k


def test_width_summary():
    res = [_res(i, (0,), [_iv(0, 0, w)]) for i, w in enumerate([1.0, 2.0, 3.0, 4.0])]
    res.append(_res(9, (0,), [_iv(0, -np.inf, np.inf, degenerate=True)]))
    row = _pooled(sci_width(res))[0]
    assert row["median_width"] == 2.5
    assert row["iqr_width"] == pytest.approx(1.5)
    assert row["count"] == 4 and row["excluded"] == 1


def test_power_and_type1():
    truth = {"s": np.array([1.0, 0.0])}
    cover0 = [_res(i, (0, 1), [_iv(0, -1, 1), _iv(1, -1, 1)]) for i in range(4)]
    row = _pooled(selective_power_type1(cover0, truth))[0]
    assert row["power"] == 0.0 and row["type1"] == 0.0
    mixed = [_res(i, (0, 1), [_iv(0, 0.5, 1.5), _iv(1, -1, 1)]) for i in range(4)]
    row = _pooled(selective_power_type1(mixed, truth))[0]
    assert row["power"] == 1.0 and row["type1"] == 0.0 and row["power_count"] == 4


def test_type1_undefined_on_allones_oracle():
    truth = {"s": np.ones(3)}
    res = [_res(i, (0, 1, 2), [_iv(j, 0.5, 1.5) for j in range(3)], method="oracle") for i in range(3)]
    row = _pooled(selective_power_type1(res, truth))[0]
    assert math.isnan(row["type1"]) and row["type1_count"] == 0


def test_selection_quality():
    beta0 = np.r_[1.0, 1.0, np.zeros(8)]
    assert p_true([0, 1], beta0) == 1.0
    assert p_true(range(10), beta0) == pytest.approx(0.2)
    assert math.isnan(p_true([], beta0))
    res = [_res(0, (0, 1), []), _res(1, range(10), []), _res(2, (), [])]
    row = selection_quality(res, {"s": beta0})[0]
    assert row["mean_model_size"] == pytest.approx(4.0)
    assert row["mean_p_true"] == pytest.approx(0.6)
    assert row["empty_selections"] == 1


def test_failure_summary_flags():
    res = [_res(i, (), [], fit_flags={"failed": 1} if i < 3 else {}) for i in range(10)]
    row = failure_summary(res)[0]
    assert row["failed"] == 3 and row["flagged"] == 1


def test_result_rejects_intervals_outside_selection():
    with pytest.raises(ValueError):
        _res(0, (0,), [_iv(1, 0, 1)])
    _res(0, (0,), [_iv(1, 0, 1)], method="debiased")


def test_km_censoring_survivor():
    data = SurvivalDataset([1.0, 2.0, 3.0, 4.0], [1, 0, 1, 1], np.zeros((4, 1)))
    G = km_censoring_survivor(data)
    assert G(0.0) == 1.0 and G(1.5) == 1.0
    assert G(2.0) == pytest.approx(2 / 3)
    assert G.left(2.0) == 1.0
    unc = SurvivalDataset([1.0, 2.0, 3.0], [1, 1, 1], np.zeros((3, 1)))
    assert np.all(km_censoring_survivor(unc)(np.linspace(0, 3, 7)) == 1.0)


@given(st.integers(0, 2**31 - 1), st.integers(3, 40), st.floats(0.0, 0.9))
def test_km_nonincreasing(seed, n, cens):
    data = random_dataset(np.random.default_rng(seed), n, 1, censor=cens)
    G = km_censoring_survivor(data)
    vals = G(np.linspace(0, data.time.max() * 1.1, 50))
    assert vals[0] == 1.0 and np.all(np.diff(vals) <= 0) and np.all(vals >= 0)


def test_brier_constant_one_prediction():
    data = SurvivalDataset([1.0, 2.0, 3.0], [1, 1, 1], np.zeros((3, 1)))
    G = StepFunction(np.array([]), np.array([]))
    assert brier_score(5.0, data.time, data.status, np.ones(3), G) == 1.0


def _hand_ibs(times, tau):
    """Quadrature of the uncensored Brier score of S(t) = exp(-t), piecewise between event times."""
    times = np.sort(times)

    def bs(t):
        s = math.exp(-t)
        return np.mean([s * s if y <= t else (1 - s) ** 2 for y in times])

    knots = [0.0] + [y for y in times if y < tau] + [tau]
    total = sum(integrate.quad(bs, a, b, epsabs=1e-13, epsrel=1e-13)[0] for a, b in zip(knots[:-1], knots[1:]))
    return total / tau


def test_ibs_four_observation_example():
    times = np.array([0.5, 1.2, 2.0, 3.1])
    data = SurvivalDataset(times, np.ones(4, int), np.zeros((4, 1)))
    tau = 3.0
    model = lambda t: np.tile(np.exp(-np.asarray(t)), (4, 1))
    got = integrated_brier(data, model, grid=np.linspace(0, tau, 2001))
    assert got == pytest.approx(_hand_ibs(times, tau), abs=1e-6)


@given(st.integers(0, 2**31 - 1), st.integers(4, 60), st.floats(0.0, 0.8))
def test_ibs_in_unit_interval(seed, n, cens):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, n, 2, censor=cens)
    probs = rng.uniform(size=n)
    model = lambda t: np.power.outer(probs, np.asarray(t) / (1 + np.asarray(t)))
    try:
        val = integrated_brier(data, model)
    except ValueError:
        return
    assert 0.0 <= val <= 1.0


def test_cindex():
    rng = np.random.default_rng(0)
    data = random_dataset(rng, 200, 1, censor=0.0)
    assert harrell_cindex(data, -data.time) == 1.0
    assert harrell_cindex(data, np.ones(data.n)) == 0.5
    big = random_dataset(rng, 1000, 1, censor=0.3, beta=[0.0])
    assert abs(harrell_cindex(big, rng.normal(size=1000)) - 0.5) <= 0.05
    with pytest.raises(ValueError):
        harrell_cindex(data, np.ones(3))


def test_cindex_against_pairwise_loop():
    rng = np.random.default_rng(5)
    data = random_dataset(rng, 60, 1, censor=0.4)
    risk = np.round(rng.normal(size=60), 1)
    num = den = 0.0
    for i in range(60):
        if data.status[i] != 1:
            continue
        for j in range(60):
            if data.time[j] > data.time[i]:
                den += 1
                num += 1.0 if risk[i] > risk[j] else 0.5 if risk[i] == risk[j] else 0.0
    assert harrell_cindex(data, risk, chunk=7) == pytest.approx(num / den, abs=1e-15)
