"""L1-penalised Cox regression: Lasso, adaptive Lasso, lambda paths and tuning.

The penalised objective is ``l(beta) - lam * sum_j w_j |beta_j|`` with ``l``
the log partial likelihood on the *sum* scale, so ``lam`` grows with ``n``.
It is maximised by proximal Newton steps: a quadratic model of ``l`` built
from the score and the information matrix, solved by cyclic coordinate
descent with soft-thresholding, followed by step halving on the true
objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._kernels import cd_quadratic
from .survival_core import (
    SurvivalDataset,
    _derivatives,
    fit_cox_mle,
    log_partial_likelihood,
)

TUNING_KINDS = ("cv_min", "cv_1se", "fixed", "aic", "bic")


@dataclass
class PenaltyWeights:
    w: np.ndarray
    gamma: int = 1

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if np.any(np.isnan(self.w)) or np.any(self.w < 0):
            raise ValueError("penalty weights must be nonnegative")
        if not np.any(np.isfinite(self.w)):
            raise ValueError("at least one penalty weight must be finite")

    @classmethod
    def ones(cls, p: int) -> "PenaltyWeights":
        return cls(np.ones(p))

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(np.isfinite(self.w))


@dataclass
class PenalizedFit:
    lam: float
    beta: np.ndarray
    active: np.ndarray
    signs: np.ndarray
    objective: float
    loglik: float
    converged: bool = True
    iterations: int = 0
    kkt_residual: float = 0.0

    @property
    def df(self) -> int:
        return int(self.active.size)


@dataclass
class LambdaPath:
    lambdas: np.ndarray
    fits: list
    weights: PenaltyWeights

    def __post_init__(self):
        if np.any(np.diff(self.lambdas) >= 0):
            raise ValueError("lambdas must be strictly decreasing")

    def __len__(self):
        return len(self.lambdas)


@dataclass(frozen=True)
class TuningRule:
    kind: str
    value: Optional[float] = None

    def __post_init__(self):
        if self.kind not in TUNING_KINDS:
            raise ValueError(f"unknown tuning rule {self.kind!r}; expected one of {TUNING_KINDS}")
        if self.kind == "fixed" and (self.value is None or self.value < 0):
            raise ValueError("fixed tuning needs a nonnegative lambda value")

    @classmethod
    def parse(cls, spec) -> "TuningRule":
        if isinstance(spec, TuningRule):
            return spec
        if isinstance(spec, (int, float)):
            return cls("fixed", float(spec))
        kind, _, val = str(spec).partition(":")
        return cls(kind, float(val) if val else None)


@dataclass
class CVCurve:
    lambdas: np.ndarray
    cv_deviance: np.ndarray
    cv_se: np.ndarray
    folds: np.ndarray


@dataclass
class InformationCriteria:
    lambdas: np.ndarray
    aic: np.ndarray
    bic: np.ndarray
    df: np.ndarray
    loglik: np.ndarray


def _penalized_objective(loglik, beta, lam, w):
    nz = beta != 0
    return loglik - lam * float(np.sum(w[nz] * np.abs(beta[nz])))


def kkt_residual(score, beta, lam, w) -> float:
    """Largest violation of the Lasso stationarity conditions."""
    fin = np.isfinite(w)
    act = fin & (beta != 0)
    ina = fin & (beta == 0)
    r = 0.0
    if act.any():
        r = max(r, float(np.max(np.abs(score[act] - lam * w[act] * np.sign(beta[act])))))
    if ina.any():
        r = max(r, float(np.max(np.maximum(np.abs(score[ina]) - lam * w[ina], 0.0))))
    return r


def fit_cox_lasso(
    data: SurvivalDataset,
    lam: float,
    weights: Optional[PenaltyWeights] = None,
    warm_start=None,
    *,
    tol: float = 1e-7,
    inner_tol: float = 1e-7,
    kkt_tol: float = 1e-5,
    max_outer: int = 100,
    max_halvings: int = 20,
) -> PenalizedFit:
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    p = data.p
    weights = PenaltyWeights.ones(p) if weights is None else weights
    w = weights.w
    free = weights.free
    pen = lam * w[free]
    beta = np.zeros(p) if warm_start is None else np.array(warm_start, dtype=float)
    beta[~np.isfinite(w)] = 0.0

    bf = beta[free].copy()
    ll, U, I = _derivatives(data, bf, free)
    obj = _penalized_objective(ll, bf, 1.0, pen)
    kkt_scale = max(1.0, lam)
    change = np.inf
    converged = False
    bad_steps = 0
    it = 0
    for it in range(1, max_outer + 1):
        kkt = kkt_residual(U, bf, 1.0, pen)
        if kkt <= kkt_tol * kkt_scale and change < tol:
            converged = True
            break
        target = cd_quadratic(bf, U, I, pen, inner_tol, 10000)
        step = target - bf
        if not np.any(step):
            converged = kkt <= 1e-4 * kkt_scale
            break
        t = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            cand = bf + t * step
            ll_c = log_partial_likelihood(data, cand, free)
            obj_c = _penalized_objective(ll_c, cand, 1.0, pen)
            if obj_c >= obj - 1e-13 * abs(obj):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            bad_steps += 1
            if bad_steps >= 2:
                break
            continue
        change = abs(obj_c - obj) / max(1.0, abs(obj))
        bf, obj = cand, obj_c
        ll, U, I = _derivatives(data, bf, free)
    else:
        converged = kkt_residual(U, bf, 1.0, pen) <= 1e-4 * kkt_scale

    beta = np.zeros(p)
    beta[free] = bf
    active = np.flatnonzero(beta)
    score_full = np.zeros(p)
    score_full[free] = U
    return PenalizedFit(
        lam=float(lam), beta=beta, active=active, signs=np.sign(beta[active]).astype(int),
        objective=obj, loglik=ll, converged=converged, iterations=it,
        kkt_residual=kkt_residual(score_full, beta, lam, w),
    )


def lambda_max(data: SurvivalDataset, weights: Optional[PenaltyWeights] = None) -> float:
    weights = PenaltyWeights.ones(data.p) if weights is None else weights
    U0 = _derivatives(data, np.zeros(data.p), np.arange(data.p), hessian=False)[1]
    ok = np.isfinite(weights.w) & (weights.w > 0)
    if not ok.any():
        raise ValueError("no penalised coordinate with a finite weight")
    return float(np.max(np.abs(U0[ok]) / weights.w[ok]))


def default_eps(data: SurvivalDataset) -> float:
    return 0.05 if data.n < data.p else 0.01


def lambda_sequence(lam_max: float, n_lambda: int = 100, eps: float = 0.01) -> np.ndarray:
    if n_lambda < 2:
        raise ValueError("n_lambda must be at least 2")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    return lam_max * np.exp(np.linspace(0.0, math.log(eps), n_lambda))


def fit_path(data, lambdas, weights=None, **kw) -> list:
    fits = []
    beta = None
    for lam in lambdas:
        fit = fit_cox_lasso(data, lam, weights, warm_start=beta, **kw)
        fits.append(fit)
        beta = fit.beta
    return fits


def lambda_path(
    data: SurvivalDataset,
    weights: Optional[PenaltyWeights] = None,
    n_lambda: int = 100,
    eps: Optional[float] = None,
) -> LambdaPath:
    weights = PenaltyWeights.ones(data.p) if weights is None else weights
    eps = default_eps(data) if eps is None else eps
    lams = lambda_sequence(lambda_max(data, weights), n_lambda, eps)
    return LambdaPath(lams, fit_path(data, lams, weights), weights)


def adaptive_weights(init_beta, gamma: int = 1) -> PenaltyWeights:
    """``w_j = 1/|b_j|^gamma``; coordinates with ``|b_j| < 1e-8`` are excluded."""
    b = np.abs(np.asarray(init_beta, dtype=float))
    with np.errstate(divide="ignore"):
        w = np.where(b < 1e-8, np.inf, 1.0 / b**gamma)
    return PenaltyWeights(w, gamma)


def initial_estimate(data: SurvivalDataset, ridge: float = 1e-3) -> np.ndarray:
    """Preliminary estimate for adaptive weights: MLE, or ridge when p >= n/2 or the MLE fails."""
    if data.p < data.n / 2:
        fit = fit_cox_mle(data)
        if fit.converged:
            return fit.beta
    return fit_cox_mle(data, ridge=ridge).beta


def assign_folds(data: SurvivalDataset, folds: int, rng, max_attempts: int = 10) -> np.ndarray:
    if folds < 2:
        raise ValueError("need at least two folds")
    for _ in range(max_attempts):
        ids = rng.permutation(np.arange(data.n) % folds)
        if all(data.status[ids == k].any() for k in range(folds)):
            return ids
    raise ValueError(f"could not assign {folds} folds with at least one event each")


def cross_validate(
    data: SurvivalDataset,
    weights: Optional[PenaltyWeights],
    path: LambdaPath,
    folds: int = 10,
    rng=None,
    fold_ids=None,
) -> CVCurve:
    """Cross-validated partial-likelihood deviance on the path's lambda grid.

    Fold ``k`` contributes ``-2 [l_full(b_k) - l_{-k}(b_k)]`` per event in the
    fold, where ``b_k`` is fitted without fold ``k``.
    """
    weights = path.weights if weights is None else weights
    if fold_ids is None:
        rng = np.random.default_rng() if rng is None else rng
        fold_ids = assign_folds(data, folds, rng)
    fold_ids = np.asarray(fold_ids)
    K = int(fold_ids.max()) + 1
    full = np.arange(data.p)
    dev = np.empty((K, len(path.lambdas)))
    events = np.empty(K)
    for k in range(K):
        train = data.subset_rows(np.flatnonzero(fold_ids != k))
        events[k] = data.status[fold_ids == k].sum()
        for i, fit in enumerate(fit_path(train, path.lambdas, weights)):
            dev[k, i] = -2.0 * (
                log_partial_likelihood(data, fit.beta, full) - log_partial_likelihood(train, fit.beta, full)
            )
    per_event = dev / events[:, None]
    wts = events / events.sum()
    cvm = wts @ per_event
    var = wts @ (per_event - cvm) ** 2
    cvsd = np.sqrt(var / (K - 1))
    return CVCurve(path.lambdas.copy(), cvm, cvsd, fold_ids)


def information_criteria(data: SurvivalDataset, weights, path: LambdaPath, penalty_n: str = "events") -> InformationCriteria:
    d = data.n_events if penalty_n == "events" else data.n
    if data.n_events == 0:
        raise ValueError("information criteria need at least one event")
    ll = np.array([f.loglik for f in path.fits])
    df = np.array([f.df for f in path.fits], dtype=float)
    return InformationCriteria(
        path.lambdas.copy(), -2 * ll + 2 * df, -2 * ll + math.log(d) * df, df, ll
    )


def select_lambda(rule: TuningRule, path: Optional[LambdaPath] = None, cv: Optional[CVCurve] = None,
                  criteria: Optional[InformationCriteria] = None) -> float:
    """Apply a tuning rule; ties go to the larger lambda."""
    rule = TuningRule.parse(rule)
    if rule.kind == "fixed":
        return float(rule.value)
    if rule.kind in ("cv_min", "cv_1se"):
        if cv is None:
            raise ValueError(f"{rule.kind} needs a cross-validation curve")
        i = int(np.argmin(cv.cv_deviance))
        if rule.kind == "cv_min":
            return float(cv.lambdas[i])
        thresh = cv.cv_deviance[i] + cv.cv_se[i]
        return float(cv.lambdas[np.flatnonzero(cv.cv_deviance <= thresh)[0]])
    if criteria is None:
        raise ValueError(f"{rule.kind} needs information criteria")
    vals = criteria.aic if rule.kind == "aic" else criteria.bic
    return float(criteria.lambdas[int(np.argmin(vals))])


@dataclass
class SelectionSpec:
    """How a Lasso selection is carried out: flavour, tuning rule and path settings."""

    flavor: str = "standard"
    rule: TuningRule = field(default_factory=lambda: TuningRule("cv_min"))
    gamma: int = 1
    n_lambda: int = 100
    eps: Optional[float] = None
    folds: int = 10
    ic_penalty_n: str = "events"

    def __post_init__(self):
        if self.flavor not in ("standard", "adaptive"):
            raise ValueError(f"unknown lasso flavour {self.flavor!r}")
        self.rule = TuningRule.parse(self.rule)


@dataclass
class Selection:
    fit: PenalizedFit
    weights: PenaltyWeights
    lam: float
    path: Optional[LambdaPath] = None
    cv: Optional[CVCurve] = None
    criteria: Optional[InformationCriteria] = None


def select_model(data: SurvivalDataset, spec: SelectionSpec, rng=None) -> Selection:
    """Run the full selection pipeline (weights, path, tuning) on standardised data."""
    rng = np.random.default_rng() if rng is None else rng
    if spec.flavor == "adaptive":
        weights = adaptive_weights(initial_estimate(data), spec.gamma)
    else:
        weights = PenaltyWeights.ones(data.p)
    if spec.rule.kind == "fixed":
        lam = spec.rule.value
        path = lambda_path(data, weights, spec.n_lambda, spec.eps)
        beta0 = None
        above = np.flatnonzero(path.lambdas >= lam)
        if above.size:
            beta0 = path.fits[above[-1]].beta
        return Selection(fit_cox_lasso(data, lam, weights, beta0), weights, lam, path)
    path = lambda_path(data, weights, spec.n_lambda, spec.eps)
    cv = crit = None
    if spec.rule.kind in ("cv_min", "cv_1se"):
        cv = cross_validate(data, weights, path, spec.folds, rng)
    else:
        crit = information_criteria(data, weights, path, spec.ic_penalty_n)
    lam = select_lambda(spec.rule, path, cv, crit)
    fit = path.fits[int(np.flatnonzero(path.lambdas == lam)[0])]
    return Selection(fit, weights, lam, path, cv, crit)


def calibrate_fixed_lambda(scenario, n_pop: int = 100_000, n_rep: int = 1000, rng=None,
                           spec: Optional[SelectionSpec] = None) -> float:
    """Median cv_min lambda over ``n_rep`` size-``n`` subsamples of one large population."""
    from .datagen import generate

    rng = np.random.default_rng() if rng is None else rng
    spec = SelectionSpec(rule=TuningRule("cv_min")) if spec is None else spec
    spec = SelectionSpec(spec.flavor, TuningRule("cv_min"), spec.gamma, spec.n_lambda, spec.eps, spec.folds)
    pop = generate(scenario, rng, n=n_pop)
    lams = []
    for _ in range(n_rep):
        idx = rng.choice(pop.n, size=scenario.n, replace=False)
        sub = pop.subset_rows(np.sort(idx)).standardize()
        lams.append(select_model(sub, spec, rng).lam)
    return float(np.median(lams))
