import math

import numpy as np
import pytest
from scipy import integrate, stats

from coxsi.inference import (
    SelectionEvent,
    SelectiveInterval,
    estimate_nodewise_inverse,
    exact_inverse,
    infer_debiased,
    infer_exact_psi,
    infer_full,
    infer_oracle,
    infer_refit,
    infer_refit0,
    infer_split,
    selective_interval_1d,
    split_halves,
    truncated_normal_cdf,
    truncation_limits,
)
from coxsi.penalized import PenalizedFit, SelectionSpec, fit_cox_lasso, lambda_max, lambda_path
from coxsi.survival_core import SurvivalDataset, fit_cox_mle, wald_ci

from _oracles import random_dataset


def _data(rng, n=150, p=5, censor=0.2):
    beta = np.r_[0.8, -0.6, 0.5, np.zeros(p - 3)]
    return random_dataset(rng, n, p, censor=censor, beta=beta).standardize()


def _fit_at(data, frac):
    return fit_cox_lasso(data, frac * lambda_max(data))


def test_interval_validation():
    with pytest.raises(ValueError):
        SelectiveInterval(0, 0.0, -1.0, 1.0, 1.5, "submodel", "refit")
    with pytest.raises(ValueError):
        SelectiveInterval(0, 0.0, -1.0, 1.0, 0.1, "other", "refit")
    iv = SelectiveInterval(0, 0.0, -1.0, 2.0, 0.1, "submodel", "refit")
    assert iv.width == 3.0 and iv.contains(1.5) and not iv.contains(2.5)


def test_full_matches_wald_p1(rng):
    data = random_dataset(rng, 80, 1)
    (iv,) = infer_full(data, 0.1)
    (lo, hi), = wald_ci(fit_cox_mle(data), 0.1)[0]
    assert (iv.lower, iv.upper) == (lo, hi)
    assert iv.target_kind == "full_model"


def test_full_zero_column_flagged(rng):
    X = np.column_stack([rng.normal(size=50), np.zeros(50)])
    data = SurvivalDataset(rng.exponential(size=50) + 1e-3, np.ones(50, int), X)
    ivs = infer_full(data)
    assert ivs[1].degenerate and math.isinf(ivs[1].width)
    assert not ivs[0].degenerate


def test_oracle_and_refit_consistency(rng):
    data = _data(rng)
    full = infer_full(data)
    oracle = infer_oracle(data, range(data.p))
    assert [(a.lower, a.upper) for a in full] == [(b.lower, b.upper) for b in oracle]
    assert infer_oracle(data, []) == []
    ev = SelectionEvent(np.array([0, 1, 2]), np.array([1, -1, 1]), 1.0)
    refit = infer_refit(data, ev)
    oracle = infer_oracle(data, [0, 1, 2])
    assert [(a.lower, a.upper) for a in refit] == [(b.lower, b.upper) for b in oracle]
    assert infer_refit(data, SelectionEvent(np.array([], int), np.array([], int), 1.0)) == []


def test_oracle_narrower_than_full():
    rng = np.random.default_rng(4)
    beta0 = np.r_[1.0, 1.0, np.zeros(8)]
    wins = 0
    reps = 60
    for _ in range(reps):
        data = random_dataset(rng, 400, 10, censor=0.0, beta=beta0)
        full = infer_full(data)
        orc = infer_oracle(data, [0, 1])
        wins += all(o.width < full[o.coef_index].width for o in orc)
    assert wins / reps >= 0.9


def test_refit0_at_lambda_zero_equals_refit(rng):
    data = _data(rng)
    fit = fit_cox_lasso(data, 0.0)
    r0 = infer_refit0(data, fit)
    r = infer_refit(data, SelectionEvent.from_fit(fit))
    for a, b in zip(r0, r):
        assert a.estimate == pytest.approx(b.estimate, abs=1e-5)
        assert a.lower == pytest.approx(b.lower, abs=1e-5)
        assert a.upper == pytest.approx(b.upper, abs=1e-5)


def test_refit0_gap_shrinks_along_path(rng):
    data = _data(rng, 200)
    path = lambda_path(data, n_lambda=40)
    gaps = []
    for fit in path.fits[10::10]:
        r0 = {iv.coef_index: iv.estimate for iv in infer_refit0(data, fit)}
        r = {iv.coef_index: iv.estimate for iv in infer_refit(data, SelectionEvent.from_fit(fit))}
        gaps.append(max(abs(r0[j] - r[j]) for j in r))
    assert gaps[-1] < gaps[0]
    empty = PenalizedFit(1.0, np.zeros(data.p), np.array([], int), np.array([], int), 0.0, 0.0)
    assert infer_refit0(data, empty) == []


def test_split_halves_and_determinism(rng):
    data = _data(rng, 100)
    a, b = split_halves(data, np.random.default_rng(5))
    assert set(a) | set(b) == set(range(data.n)) and not set(a) & set(b)
    assert abs(data.status[a].sum() - data.status[b].sum()) <= 1
    spec = SelectionSpec(folds=5, n_lambda=30)
    e1, i1, _ = infer_split(data, spec, 0.1, np.random.default_rng(8))
    e2, i2, _ = infer_split(data, spec, 0.1, np.random.default_rng(8))
    np.testing.assert_array_equal(e1.active, e2.active)
    assert [(x.lower, x.upper) for x in i1] == [(x.lower, x.upper) for x in i2]
    assert [iv.coef_index for iv in i1] == sorted(e1.active.tolist())


def test_split_inference_half_ignores_selection_half(rng):
    data = _data(rng, 120)
    A, B = split_halves(data, np.random.default_rng(1))
    E = SelectionEvent(np.array([0, 2]), np.array([1, 1]), 1.0)
    base = infer_refit(data.subset_rows(B), E)
    # rebuild the selection half from fresh draws; the inference half is untouched
    other = random_dataset(rng, len(A), data.p)
    mixed_X = data.X.copy()
    mixed_X[A] = other.X
    mixed = SurvivalDataset(data.time, data.status, mixed_X, data.center, data.scale)
    again = infer_refit(mixed.subset_rows(B), E)
    assert [(x.lower, x.upper) for x in base] == [(x.lower, x.upper) for x in again]


def test_nodewise_zero_lambda_is_inverse(rng):
    data = _data(rng, 200)
    beta = fit_cox_mle(data).beta
    nw = estimate_nodewise_inverse(data, beta, lam=0.0, tol=1e-14)
    np.testing.assert_allclose(nw.theta, np.linalg.inv(nw.sigma), atol=1e-6)


def test_nodewise_kkt(rng):
    data = _data(rng, 200, 8)
    fit = _fit_at(data, 0.2)
    nw = estimate_nodewise_inverse(data, fit.beta)
    TS = nw.theta @ nw.sigma
    for j in range(data.p):
        assert abs(TS[j, j] - 1) <= 0.1
        off = np.delete(TS[j], j)
        assert np.max(np.abs(off)) <= nw.nodewise_lambdas[j] / nw.tau_sq[j] + 1e-6


def test_nodewise_diagonal_sigma(monkeypatch):
    from coxsi import inference

    sigma = np.diag([2.0, 0.5, 1.0])

    class Fake:
        n, p = 10, 3

    # inject a diagonal information matrix directly
    monkeypatch.setattr(inference, "_derivatives", lambda data, beta, subset, hessian=True: (0.0, np.zeros(3), sigma * 10))
    nw = estimate_nodewise_inverse(Fake(), np.zeros(3), lam=0.1)
    np.testing.assert_allclose(nw.theta, np.diag(1 / np.diag(sigma)), atol=1e-12)


def test_debiased_reduction(rng):
    for _ in range(5):
        data = _data(rng, 120, 4)
        mle = fit_cox_mle(data)
        fit = fit_cox_lasso(data, 0.0)
        ivs = infer_debiased(data, fit, exact_inverse(data, fit.beta), 0.1)
        wald = infer_full(data, 0.1)
        for a, b in zip(ivs, wald):
            assert a.estimate == pytest.approx(b.estimate, abs=1e-5)
            assert a.lower == pytest.approx(b.lower, abs=1e-5)
            assert a.upper == pytest.approx(b.upper, abs=1e-5)
        np.testing.assert_allclose([iv.estimate for iv in ivs], mle.beta / data.scale, atol=1e-5)


def test_debiased_identity_half_width(rng):
    from coxsi.inference import NodewiseInverse

    data = _data(rng, 100, 3)
    fit = _fit_at(data, 0.3)
    nw = NodewiseInverse(np.eye(3), np.ones(3), np.zeros(3), np.eye(3))
    for iv in infer_debiased(data, fit, nw, 0.1):
        half = iv.width / 2 * data.scale[iv.coef_index]
        assert half == pytest.approx(stats.norm.ppf(0.95) / math.sqrt(data.n), rel=1e-12)


def test_debiased_degenerate_row(rng):
    from coxsi.inference import NodewiseInverse

    data = _data(rng, 100, 3)
    fit = _fit_at(data, 0.3)
    nw = NodewiseInverse(np.eye(3), np.ones(3), np.zeros(3), np.eye(3), np.array([False, True, False]))
    ivs = infer_debiased(data, fit, nw)
    assert ivs[1].degenerate and math.isinf(ivs[1].width)


def test_truncated_cdf_edges():
    assert truncated_normal_cdf(0.3, 0.0, 1.0, -np.inf, np.inf) == pytest.approx(stats.norm.cdf(0.3), abs=1e-15)
    assert truncated_normal_cdf(-1.0, 0.0, 1.0, -1.0, 2.0) == 0.0
    assert truncated_normal_cdf(2.0, 0.0, 1.0, -1.0, 2.0) == 1.0


@pytest.mark.parametrize("shift", [10.0, 25.0, 40.0])
def test_truncated_cdf_far_tail_quadrature(shift):
    vm, vp, sigma = 1.0, 1.8, 0.7
    mu = vm - shift * sigma
    x = 1.3

    # quadrature on the shifted density exp(-(z^2 - a^2)/2) avoids underflow
    a = (vm - mu) / sigma
    dens = lambda z: math.exp(-0.5 * (z * z - a * a))
    num = integrate.quad(dens, a, (x - mu) / sigma, epsabs=0, epsrel=1e-13)[0]
    den = integrate.quad(dens, a, (vp - mu) / sigma, epsabs=0, epsrel=1e-13)[0]
    got = truncated_normal_cdf(x, mu, sigma, vm, vp)
    assert 0 < got < 1
    assert got == pytest.approx(num / den, abs=1e-6)
    mirrored = truncated_normal_cdf(-x, -mu, sigma, -vp, -vm)
    assert 1 - mirrored == pytest.approx(num / den, abs=1e-6)


def test_truncated_cdf_monotone_in_mu():
    mus = np.linspace(-30, 30, 601)
    vals = [truncated_normal_cdf(0.4, m, 1.0, -0.5, 2.0) for m in mus]
    assert np.all(np.diff(vals) <= 0)
    inner = (np.array(vals) > 1e-12) & (np.array(vals) < 1 - 1e-12)
    assert np.all(np.diff(np.array(vals)[inner]) < 0)


def test_selective_interval_untruncated_is_wald():
    est, lo, hi, deg = selective_interval_1d(1.2, 0.5, -np.inf, np.inf, 0.1)
    z = stats.norm.ppf(0.95)
    assert (est, lo, hi, deg) == (1.2, pytest.approx(1.2 - z * 0.5), pytest.approx(1.2 + z * 0.5), False)


def test_selective_interval_boundary_degenerate():
    for vm, vp in [(1.2, np.inf), (-np.inf, 1.2)]:
        _, lo, hi, deg = selective_interval_1d(1.2, 0.5, vm, vp, 0.1)
        assert deg and (math.isinf(lo) or math.isinf(hi))


def test_selective_interval_contains_estimate():
    rng = np.random.default_rng(0)
    for _ in range(200):
        vm = rng.normal() - 0.5
        vp = vm + rng.exponential()
        x = rng.uniform(vm, vp)
        est, lo, hi, deg = selective_interval_1d(x, 0.3, vm, np.inf if rng.uniform() < 0.3 else vp, 0.1)
        if not deg:
            assert lo <= est <= hi


def test_pivot_uniform_on_gaussian_surrogate():
    # a 2-d Gaussian with known mean, conditioned on the sign event of a soft-thresholded statistic
    rng = np.random.default_rng(2024)
    mu = np.array([0.4, -0.2])
    Sigma = np.array([[1.0, 0.4], [0.4, 0.8]])
    L = np.linalg.cholesky(Sigma)
    lam = 0.3
    signs = np.array([1.0, -1.0])
    A = -np.diag(signs)
    b = -lam * signs * (Sigma @ signs)
    eta = np.array([1.0, 0.0])
    pivots = []
    while len(pivots) < 2000:
        y = mu + L @ rng.standard_normal(2)
        if np.any(A @ y > b):
            continue
        vm, vp, sd = truncation_limits(A, b, Sigma, eta, y)
        pivots.append(truncated_normal_cdf(eta @ y, eta @ mu, sd, vm, vp))
    assert stats.kstest(pivots, "uniform").pvalue > 0.01


def test_psi_without_constraints_equals_refit0(rng):
    data = _data(rng)
    fit = _fit_at(data, 0.3)
    psi = infer_exact_psi(data, fit, constraints=False)
    r0 = infer_refit0(data, fit)
    assert len(psi) == len(r0) == fit.df
    for a, b in zip(psi, r0):
        assert a.lower == pytest.approx(b.lower, abs=1e-6)
        assert a.upper == pytest.approx(b.upper, abs=1e-6)
        assert a.estimate == pytest.approx(b.estimate, abs=1e-6)


def test_psi_intervals_wider_and_ordered(rng):
    data = _data(rng, 200)
    fit = _fit_at(data, 0.2)
    details = []
    psi = infer_exact_psi(data, fit, details=details)
    r0 = {iv.coef_index: iv for iv in infer_refit0(data, fit)}
    assert len(details) == fit.df
    for iv, d in zip(psi, details):
        assert d.v_minus <= d.observed <= d.v_plus
        if not iv.degenerate:
            assert iv.lower <= iv.estimate <= iv.upper
            assert iv.width >= r0[iv.coef_index].width - 1e-9


def test_reporting_contract(rng):
    data = _data(rng)
    fit = _fit_at(data, 0.4)
    E = set(fit.active.tolist())
    for ivs in (infer_refit0(data, fit), infer_exact_psi(data, fit)):
        assert {iv.coef_index for iv in ivs} == E
    assert len(infer_debiased(data, fit, estimate_nodewise_inverse(data, fit.beta))) == data.p
