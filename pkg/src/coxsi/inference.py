"""Confidence intervals after Lasso selection in the Cox model.

Seven procedures, each returning a list of :class:`SelectiveInterval` on the
original covariate scale:

========== ==================================================================
full       Wald intervals from the unpenalised fit on all covariates
oracle     Wald intervals on the truly active covariates
refit      Wald intervals after refitting the selected model
refit0     Wald intervals around a single Newton step from the Lasso solution
split      select on one half of the data, refit on the other half
debiased   one-step bias correction with a nodewise inverse information
exact_psi  truncated-Gaussian intervals conditioning on the active signs
========== ==================================================================

All fitting happens on the (standardised) scale of the dataset passed in;
``data.scale`` maps coefficients and bounds back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import log_ndtr, ndtr
from scipy.stats import norm

from ._kernels import cd_quadratic
from .penalized import PenalizedFit, PenaltyWeights, Selection, SelectionSpec, select_model
from .survival_core import (
    SurvivalDataset,
    _derivatives,
    covariance_from_information,
    fit_cox_mle,
    one_step_update,
    wald_ci,
)

METHODS = ("full", "oracle", "refit", "refit0", "split", "debiased", "exact_psi")


@dataclass
class SelectiveInterval:
    coef_index: int
    estimate: float
    lower: float
    upper: float
    alpha: float
    target_kind: str
    method: str
    degenerate: bool = False

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.target_kind not in ("submodel", "full_model"):
            raise ValueError(f"unknown target kind {self.target_kind!r}")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


@dataclass
class SelectionEvent:
    active: np.ndarray
    signs: np.ndarray
    lam: float
    weights: Optional[PenaltyWeights] = None

    @classmethod
    def from_fit(cls, fit: PenalizedFit, weights: Optional[PenaltyWeights] = None) -> "SelectionEvent":
        return cls(fit.active.copy(), fit.signs.copy(), fit.lam, weights)


@dataclass
class NodewiseInverse:
    theta: np.ndarray
    tau_sq: np.ndarray
    nodewise_lambdas: np.ndarray
    sigma: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.tau_sq), bool)


def _z(alpha):
    return norm.ppf(1 - alpha / 2)


def _wald_intervals(data, fit, alpha, method, target_kind="submodel", estimates=None):
    cis, flags = wald_ci(fit, alpha)
    est = fit.beta if estimates is None else estimates
    out = []
    for k, j in enumerate(fit.subset):
        s = data.scale[j]
        lo, hi = cis[k]
        out.append(SelectiveInterval(int(j), est[k] / s, lo / s, hi / s, alpha, target_kind, method, bool(flags[k])))
    return out


def infer_full(data: SurvivalDataset, alpha: float = 0.1):
    fit = fit_cox_mle(data)
    return _wald_intervals(data, fit, alpha, "full", "full_model")


def infer_oracle(data: SurvivalDataset, true_active, alpha: float = 0.1):
    true_active = np.asarray(true_active, int)
    if true_active.size == 0:
        return []
    fit = fit_cox_mle(data, np.sort(true_active))
    return _wald_intervals(data, fit, alpha, "oracle")


def infer_refit(data: SurvivalDataset, event: SelectionEvent, alpha: float = 0.1, method: str = "refit"):
    if len(event.active) == 0:
        return []
    fit = fit_cox_mle(data, np.sort(event.active))
    return _wald_intervals(data, fit, alpha, method)


def _one_step(data, fit: PenalizedFit):
    E = fit.active
    bbar = one_step_update(data, fit.beta[E], E)
    _, U, info = _derivatives(data, bbar, E)
    return E, bbar, info


def infer_refit0(data: SurvivalDataset, fit: PenalizedFit, alpha: float = 0.1):
    """Wald intervals around ``beta_E + I^{-1} U`` evaluated at the Lasso solution."""
    E = fit.active
    if E.size == 0:
        return []
    try:
        E, bbar, info = _one_step(data, fit)
    except np.linalg.LinAlgError:
        return [SelectiveInterval(int(j), fit.beta[j] / data.scale[j], -np.inf, np.inf, alpha,
                                  "submodel", "refit0", True) for j in E]
    cov, bad = covariance_from_information(info)
    z = _z(alpha)
    out = []
    for k, j in enumerate(E):
        s = data.scale[j]
        se = math.sqrt(max(cov[k, k], 0.0))
        lo, hi = (-np.inf, np.inf) if bad[k] else (bbar[k] - z * se, bbar[k] + z * se)
        out.append(SelectiveInterval(int(j), bbar[k] / s, lo / s, hi / s, alpha, "submodel", "refit0", bool(bad[k])))
    return out


def split_halves(data: SurvivalDataset, rng, max_attempts: int = 10):
    """Event-stratified random 50/50 partition; both halves keep at least one event."""
    if data.n < 4:
        raise ValueError("sample splitting needs n >= 4")
    for _ in range(max_attempts):
        a, b = [], []
        for grp in (np.flatnonzero(data.status == 1), np.flatnonzero(data.status == 0)):
            perm = rng.permutation(grp)
            # alternate which half gets the odd element so halves stay balanced
            k = (len(perm) + (len(a) <= len(b))) // 2 if len(perm) % 2 else len(perm) // 2
            a.extend(perm[:k])
            b.extend(perm[k:])
        a, b = np.sort(a), np.sort(b)
        if data.status[a].any() and data.status[b].any():
            return a, b
    raise ValueError("could not split the data with events in both halves")


def infer_split(data: SurvivalDataset, spec: SelectionSpec, alpha: float = 0.1, rng=None):
    """Select on half A with the full Lasso pipeline, then Wald-refit on half B.

    Returns ``(event, intervals, selection)``.
    """
    rng = np.random.default_rng() if rng is None else rng
    a, b = split_halves(data, rng)
    half_a, half_b = data.subset_rows(a), data.subset_rows(b)
    sel = select_model(half_a, spec, rng)
    event = SelectionEvent.from_fit(sel.fit, sel.weights)
    return event, infer_refit(half_b, event, alpha, method="split"), sel


# --- debiased Lasso ----------------------------------------------------------

def default_nodewise_lambda(n: int, p: int, c: float = 1.0) -> float:
    return c * math.sqrt(math.log(max(p, 2)) / n)


def estimate_nodewise_inverse(data: SurvivalDataset, beta_hat, lam=None, c: float = 1.0,
                              tol: float = 1e-10) -> NodewiseInverse:
    """Approximate inverse of ``Sigma = I(beta_hat)/n`` by nodewise Lasso on ``Sigma``.

    ``lam`` is the shared nodewise penalty (scalar or per-row array); by
    default ``c * sqrt(log p / n)``.
    """
    p = data.p
    beta_hat = np.asarray(beta_hat, float)
    sigma = _derivatives(data, beta_hat, np.arange(p))[2] / data.n
    lam = default_nodewise_lambda(data.n, p, c) if lam is None else lam
    lams = np.broadcast_to(np.asarray(lam, float), (p,)).copy()
    theta = np.zeros((p, p))
    tau_sq = np.zeros(p)
    degenerate = np.zeros(p, bool)
    for j in range(p):
        rest = np.delete(np.arange(p), j)
        H = np.ascontiguousarray(sigma[np.ix_(rest, rest)])
        g = np.ascontiguousarray(sigma[rest, j])
        gam = cd_quadratic(np.zeros(p - 1), g, H, np.full(p - 1, lams[j]), tol, 100000) if p > 1 else np.zeros(0)
        t2 = sigma[j, j] - g @ gam
        if t2 <= 1e-10:
            degenerate[j] = True
            t2 = max(t2, 1e-10)
        tau_sq[j] = t2
        theta[j, j] = 1.0 / t2
        theta[j, rest] = -gam / t2
    return NodewiseInverse(theta, tau_sq, lams, sigma, degenerate)


def exact_inverse(data: SurvivalDataset, beta_hat) -> NodewiseInverse:
    """``Theta = (I/n)^{-1}`` directly, for low-dimensional checks."""
    p = data.p
    sigma = _derivatives(data, np.asarray(beta_hat, float), np.arange(p))[2] / data.n
    theta = np.linalg.inv(sigma)
    return NodewiseInverse(theta, 1.0 / np.diag(theta), np.zeros(p), sigma)


def infer_debiased(data: SurvivalDataset, fit: PenalizedFit, nodewise: NodewiseInverse,
                   alpha: float = 0.1, variance: str = "sandwich"):
    """Debiased estimates ``b + Theta U(b)/n`` with intervals ``+/- z sigma_j / sqrt(n)`` for all p."""
    n, p = data.n, data.p
    beta = np.asarray(fit.beta, float)
    U = _derivatives(data, beta, np.arange(p), hessian=False)[1]
    theta = nodewise.theta
    btilde = beta + theta @ U / n
    if variance == "sandwich":
        var = np.einsum("ij,jk,ik->i", theta, nodewise.sigma, theta)
    elif variance == "theta":
        var = np.diag(theta).copy()
    else:
        raise ValueError(f"unknown variance form {variance!r}")
    z = _z(alpha)
    out = []
    for j in range(p):
        s = data.scale[j]
        bad = bool(nodewise.degenerate[j]) or not var[j] > 0
        half = z * math.sqrt(var[j] / n) if not bad else np.inf
        out.append(SelectiveInterval(j, btilde[j] / s, (btilde[j] - half) / s, (btilde[j] + half) / s,
                                     alpha, "full_model", "debiased", bad))
    return out


# --- exact post-selection inference ------------------------------------------

def truncated_normal_cdf(x, mu, sigma, v_minus, v_plus) -> float:
    """CDF at ``x`` of ``N(mu, sigma^2)`` truncated to ``[v_minus, v_plus]``.

    Evaluated in log space on whichever side of the mean the truncation
    interval lies, so far-tail truncation gives finite values in [0, 1].
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not v_minus < v_plus:
        raise ValueError("need v_minus < v_plus")
    if x <= v_minus:
        return 0.0
    if x >= v_plus:
        return 1.0
    a = (v_minus - mu) / sigma
    b = (v_plus - mu) / sigma
    z = (x - mu) / sigma
    if a > 0:
        # upper tail: use survival functions, log Phi-bar(t) = log_ndtr(-t)
        la, lz, lb = log_ndtr(-a), log_ndtr(-z), log_ndtr(-b)
        num = -math.expm1(lz - la)
        den = -math.expm1(lb - la)
    elif b < 0:
        la, lz, lb = log_ndtr(a), log_ndtr(z), log_ndtr(b)
        num = math.exp(lz - lb) - math.exp(la - lb)
        den = -math.expm1(la - lb)
    else:
        pa, pz, pb = ndtr(a), ndtr(z), ndtr(b)
        num, den = pz - pa, pb - pa
    if den <= 0:
        # truncation interval thinner than floating point resolution of the tail
        return float(np.clip((x - v_minus) / (v_plus - v_minus), 0.0, 1.0))
    return float(np.clip(num / den, 0.0, 1.0))


def truncation_limits(A, b, Sigma, eta, y):
    """Range of ``eta'y`` compatible with ``A y <= b`` when the orthogonal part is held fixed."""
    s2 = float(eta @ Sigma @ eta)
    c = Sigma @ eta / s2
    z = y - c * (eta @ y)
    Ac = A @ c
    resid = b - A @ z
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = resid / Ac
    tol = 1e-12 * max(1.0, np.abs(Ac).max()) if Ac.size else 0.0
    pos, neg = Ac > tol, Ac < -tol
    v_plus = float(ratio[pos].min()) if pos.any() else np.inf
    v_minus = float(ratio[neg].max()) if neg.any() else -np.inf
    return v_minus, v_plus, math.sqrt(s2)


def _solve_mu(x, sigma, vm, vp, target, limit):
    """Find ``mu`` with ``F_mu(x) = target``; F is decreasing in mu.  None if outside +/- limit*sigma."""
    f = lambda m: truncated_normal_cdf(x, m, sigma, vm, vp) - target
    lo, hi = x - sigma, x + sigma
    step = sigma
    while f(lo) < 0:
        step *= 2
        lo = x - step
        if step > limit * sigma:
            return None, -1
    step = sigma
    while f(hi) > 0:
        step *= 2
        hi = x + step
        if step > limit * sigma:
            return None, 1
    flo = f(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-10 * sigma:
            break
    return 0.5 * (lo + hi), 0


def selective_interval_1d(x, sigma, vm, vp, alpha, limit: float = 1e4):
    """Equal-tailed truncated-Gaussian interval and median-unbiased estimate.

    Returns ``(estimate, lower, upper, degenerate)``.
    """
    if not np.isfinite(vm) and not np.isfinite(vp):
        z = _z(alpha)
        return x, x - z * sigma, x + z * sigma, False
    if vp - vm < 1e-10 * sigma or x <= vm or x >= vp:
        # empty or boundary truncation: the pivot is constant in mu
        return x, -np.inf, np.inf, True
    degenerate = False
    res = []
    for target in (1 - alpha / 2, alpha / 2, 0.5):
        mu, side = _solve_mu(x, sigma, vm, vp, target, limit)
        if mu is None:
            degenerate = True
            mu = -np.inf if side < 0 else np.inf
        res.append(mu)
    lower, upper, est = res
    if not np.isfinite(est):
        est = x
    return est, lower, upper, degenerate


@dataclass
class PSIDetail:
    coef_index: int
    observed: float
    sigma: float
    v_minus: float
    v_plus: float


def psi_constraints(E, signs, lam, w_active, Sigma):
    """Sign constraints ``diag(s)(y - lam Sigma W s) >= 0`` written as ``A y <= b``."""
    s = np.asarray(signs, float)
    A = -np.diag(s)
    b = -lam * s * (Sigma @ (w_active * s))
    return A, b


def infer_exact_psi(data: SurvivalDataset, fit: PenalizedFit, alpha: float = 0.1,
                    weights: Optional[PenaltyWeights] = None, constraints: bool = True,
                    details: Optional[list] = None):
    """Polyhedral intervals for the active coefficients at a fixed lambda.

    The one-step estimator ``bbar`` on the active set is treated as
    ``N(beta_E, I(bbar)^{-1})`` and conditioned on the active signs, written
    as ``diag(s)(bbar - lam I(beta_hat)^{-1} W s) >= 0``.  The reported
    estimate is the median-unbiased value of the truncated model.
    """
    E = fit.active
    if E.size == 0:
        return []
    w = np.ones(data.p) if weights is None else weights.w
    try:
        E, bbar, info = _one_step(data, fit)
        Sigma = np.linalg.inv(info)
        # offset from the information at the Lasso solution, which keeps the observed point feasible
        Sigma_hat = np.linalg.inv(_derivatives(data, fit.beta[E], E)[2])
    except np.linalg.LinAlgError:
        return [SelectiveInterval(int(j), fit.beta[j] / data.scale[j], -np.inf, np.inf, alpha,
                                  "submodel", "exact_psi", True) for j in E]
    A, b = psi_constraints(E, fit.signs, fit.lam, w[E], Sigma_hat)
    out = []
    for k, j in enumerate(E):
        eta = np.zeros(E.size)
        eta[k] = 1.0
        x = float(bbar[k])
        if constraints:
            vm, vp, sd = truncation_limits(A, b, Sigma, eta, bbar)
        else:
            vm, vp, sd = -np.inf, np.inf, math.sqrt(Sigma[k, k])
        # the constraint uses the covariance at bbar, so the observed point can sit a hair outside
        vm, vp = min(vm, x), max(vp, x)
        if details is not None:
            details.append(PSIDetail(int(j), x, sd, vm, vp))
        est, lo, hi, deg = selective_interval_1d(x, sd, vm, vp, alpha)
        s = data.scale[j]
        out.append(SelectiveInterval(int(j), est / s, lo / s, hi / s, alpha, "submodel", "exact_psi", deg))
    return out
