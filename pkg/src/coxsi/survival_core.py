"""Cox partial-likelihood machinery.

Everything here works on a :class:`SurvivalDataset` whose observed times are
pairwise distinct, so the risk set of subject ``i`` is simply every subject
observed no earlier than ``i``.  Internally the data are kept sorted by time,
which turns the risk-set sums into reverse cumulative sums.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from . import _kernels

SEPARATION_BOUND = 50.0


class SeparationWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SurvivalRecord:
    time: float
    status: int
    covariates: np.ndarray

    def __post_init__(self):
        if not self.time > 0:
            raise ValueError(f"time must be positive, got {self.time}")
        if self.status not in (0, 1):
            raise ValueError(f"status must be 0 or 1, got {self.status}")


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Right-censored survival data ``(Y, delta, X)``.

    ``center`` and ``scale`` record how ``X`` was obtained from the original
    covariates: ``X = (X_orig - center) / scale``.  A coefficient ``b`` fitted
    on ``X`` corresponds to ``b / scale`` on the original scale.
    """

    time: np.ndarray
    status: np.ndarray
    X: np.ndarray
    center: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    names: Optional[tuple] = None

    def __post_init__(self):
        time = np.asarray(self.time, dtype=float).ravel()
        status = np.asarray(self.status).ravel().astype(int)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(len(time), -1)
        n = len(time)
        if n < 2:
            raise ValueError("a survival dataset needs at least two records")
        if X.shape[0] != n or len(status) != n:
            raise ValueError("time, status and X must have the same number of rows")
        if not np.all(np.isfinite(time)) or not np.all(np.isfinite(X)):
            raise ValueError("non-finite values in time or covariates")
        if np.any(time <= 0):
            raise ValueError("observed times must be positive")
        if not np.all((status == 0) | (status == 1)):
            raise ValueError("status must be 0/1")
        if len(np.unique(time)) != n:
            raise ValueError("observed times must be pairwise distinct; jitter ties first")
        p = X.shape[1]
        center = np.zeros(p) if self.center is None else np.asarray(self.center, float)
        scale = np.ones(p) if self.scale is None else np.asarray(self.scale, float)
        if np.any(scale <= 0):
            raise ValueError("scale entries must be positive")
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "status", status)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "scale", scale)
        if self.names is not None:
            object.__setattr__(self, "names", tuple(self.names))

    @classmethod
    def from_records(cls, records: Sequence[SurvivalRecord]) -> "SurvivalDataset":
        return cls(
            time=[r.time for r in records],
            status=[r.status for r in records],
            X=np.vstack([np.asarray(r.covariates, float) for r in records]),
        )

    @property
    def n(self) -> int:
        return len(self.time)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_events(self) -> int:
        return int(self.status.sum())

    def records(self) -> list[SurvivalRecord]:
        return [SurvivalRecord(float(t), int(d), x.copy()) for t, d, x in zip(self.time, self.status, self.X)]

    @cached_property
    def order(self) -> np.ndarray:
        return np.argsort(self.time, kind="stable")

    @cached_property
    def _sorted(self):
        o = self.order
        return self.X[o], self.status[o].astype(float)

    def subset_rows(self, idx) -> "SurvivalDataset":
        idx = np.asarray(idx)
        return SurvivalDataset(self.time[idx], self.status[idx], self.X[idx], self.center, self.scale, self.names)

    def standardize(self) -> "SurvivalDataset":
        """Center and scale columns; constant columns keep scale 1."""
        mu = self.X.mean(axis=0)
        sd = self.X.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        return SurvivalDataset(
            self.time, self.status, (self.X - mu) / sd,
            center=self.center + mu * self.scale, scale=self.scale * sd, names=self.names,
        )

    def standardize_like(self, other: "SurvivalDataset") -> "SurvivalDataset":
        """Apply ``other``'s standardization record to this (unstandardized) data."""
        mu = (other.center - self.center) / self.scale
        sd = other.scale / self.scale
        return SurvivalDataset(
            self.time, self.status, (self.X - mu) / sd,
            center=other.center, scale=other.scale, names=self.names,
        )

    def to_original_scale(self, beta: np.ndarray, subset=None) -> np.ndarray:
        subset = np.arange(self.p) if subset is None else np.asarray(subset, int)
        return np.asarray(beta, float) / self.scale[subset]


@dataclass
class CoxFit:
    beta: np.ndarray
    loglik: float
    score_at_solution: np.ndarray
    information: np.ndarray
    converged: bool
    iterations: int
    subset: np.ndarray
    rank_deficient: bool = False
    separated: bool = False


@dataclass
class BreslowBaseline:
    event_times: np.ndarray
    cumulative_hazard: np.ndarray

    def __call__(self, t) -> np.ndarray:
        """Right-continuous step interpolation of the cumulative hazard."""
        t = np.asarray(t, float)
        if np.any(t < 0):
            raise ValueError("time must be nonnegative")
        k = np.searchsorted(self.event_times, t, side="right")
        H = np.concatenate([[0.0], self.cumulative_hazard])
        return H[k]


def _as_subset(data: SurvivalDataset, subset) -> np.ndarray:
    if subset is None:
        return np.arange(data.p)
    subset = np.atleast_1d(np.asarray(subset, dtype=int))
    if subset.size and (subset.min() < 0 or subset.max() >= data.p):
        raise IndexError(f"subset {subset.tolist()} out of range for p={data.p}")
    return subset


def _check_beta(beta, subset) -> np.ndarray:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.shape != subset.shape:
        raise ValueError(f"beta has length {beta.size}, subset has length {subset.size}")
    if not np.all(np.isfinite(beta)):
        raise ValueError(f"non-finite coefficients: {beta}")
    return beta


def _columns(data, subset):
    Xs, d = data._sorted
    if subset.size == data.p and np.array_equal(subset, np.arange(data.p)):
        return Xs, d
    return np.ascontiguousarray(Xs[:, subset]), d


def _log_risk(eta):
    # log sum_{j >= i} exp(eta_j), accumulated in log space
    return np.logaddexp.accumulate(eta[::-1])[::-1]


def log_partial_likelihood(data: SurvivalDataset, beta, subset=None) -> float:
    subset = _as_subset(data, subset)
    beta = _check_beta(beta, subset)
    Xsub, d = _columns(data, subset)
    return float(_kernels.cox_loglik(Xsub, d, beta))


def _derivatives(data, beta, subset, hessian=True):
    """Log-likelihood, score and (optionally) information on ``subset``."""
    Xsub, d = _columns(data, subset)
    beta = np.ascontiguousarray(beta, dtype=float)
    ok, loglik, score, info = _kernels.cox_derivatives(Xsub, d, beta, hessian)
    if not ok:
        eta = Xsub @ beta
        loglik = float(np.sum(d * (eta - _log_risk(eta))))
        return _derivatives_slow(Xsub, d, eta, loglik, hessian)
    return float(loglik), score, (info if hessian else None)


def _derivatives_slow(Xsub, d, eta, loglik, hessian):
    n, k = Xsub.shape
    score = np.zeros(k)
    info = np.zeros((k, k))
    for i in np.flatnonzero(d):
        e = eta[i:]
        pr = np.exp(e - e.max())
        pr /= pr.sum()
        xs = Xsub[i:]
        m = pr @ xs
        score += Xsub[i] - m
        if hessian:
            info += (xs * pr[:, None]).T @ xs - np.outer(m, m)
    return loglik, score, (info if hessian else None)


def score(data: SurvivalDataset, beta, subset=None) -> np.ndarray:
    subset = _as_subset(data, subset)
    beta = _check_beta(beta, subset)
    return _derivatives(data, beta, subset, hessian=False)[1]


def information(data: SurvivalDataset, beta, subset=None) -> np.ndarray:
    """Observed information, the negative Hessian of the log partial likelihood."""
    subset = _as_subset(data, subset)
    beta = _check_beta(beta, subset)
    return _derivatives(data, beta, subset)[2]


def _is_singular(info, tol=1e-10):
    if info.size == 0:
        return False
    ev = np.linalg.eigvalsh(info)
    return ev.min() <= tol * max(1.0, abs(ev.max()))


def fit_cox_mle(
    data: SurvivalDataset,
    subset=None,
    *,
    ridge: float = 0.0,
    max_iter: int = 100,
    tol: float = 1e-9,
    score_tol: float = 1e-8,
    max_halvings: int = 20,
    beta_init=None,
) -> CoxFit:
    """Newton-Raphson maximiser of the (optionally ridge-penalised) log partial likelihood.

    ``ridge`` adds ``-ridge * n / 2 * ||beta||^2`` to the objective.  A
    coefficient escaping ``|beta_j| > 50`` marks the fit as separated and not
    converged instead of raising.
    """
    subset = _as_subset(data, subset)
    if subset.size == 0:
        raise ValueError("subset must be nonempty")
    if data.n <= subset.size:
        warnings.warn(f"n={data.n} does not exceed the number of coefficients {subset.size}")
    k = subset.size
    kappa = ridge * data.n
    beta = np.zeros(k) if beta_init is None else np.asarray(beta_init, float).copy()

    def objective(b):
        ll, U, I = _derivatives(data, b, subset)
        return ll - 0.5 * kappa * b @ b, ll, U - kappa * b, I + kappa * np.eye(k)

    obj, ll, U, I = objective(beta)
    converged = separated = rank_deficient = False
    iterations = 0
    while not (converged or separated) and iterations < max_iter:
        if np.max(np.abs(U)) < score_tol:
            converged = True
            break
        try:
            step = np.linalg.solve(I, U)
        except np.linalg.LinAlgError:
            step = np.linalg.pinv(I) @ U
            rank_deficient = True
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = beta + t * step
            new = objective(cand)
            if new[0] >= obj - 1e-12 * abs(obj):
                break
            t *= 0.5
        else:
            break
        iterations += 1
        change = abs(new[0] - obj) / max(abs(obj), 1e-300)
        beta = cand
        obj, ll, U, I = new
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            separated = True
        elif change < tol or np.max(np.abs(U)) < score_tol:
            converged = True
    if _is_singular(I):
        rank_deficient = True
    if separated:
        warnings.warn("coefficient diverged; monotone likelihood suspected", SeparationWarning)
    return CoxFit(
        beta=beta, loglik=ll, score_at_solution=U, information=I,
        converged=converged and not separated, iterations=iterations, subset=subset,
        rank_deficient=rank_deficient, separated=separated,
    )


def one_step_update(data: SurvivalDataset, beta_init, subset=None) -> np.ndarray:
    """Single Newton step ``beta + I(beta)^{-1} U(beta)`` on ``subset``."""
    subset = _as_subset(data, subset)
    beta_init = _check_beta(beta_init, subset)
    _, U, I = _derivatives(data, beta_init, subset)
    if _is_singular(I, tol=1e-12):
        raise np.linalg.LinAlgError(f"information is singular on subset {subset.tolist()}")
    out = beta_init + np.linalg.solve(I, U)
    if not np.all(np.isfinite(out)):
        raise np.linalg.LinAlgError(f"one-step update not finite on subset {subset.tolist()}")
    return out


def covariance_from_information(info: np.ndarray, tol: float = 1e-10):
    """Pseudo-inverse of ``info`` plus a mask of coordinates with no information."""
    k = info.shape[0]
    if k == 0:
        return np.zeros((0, 0)), np.zeros(0, bool)
    ev, V = np.linalg.eigh(info)
    keep = ev > tol * max(1.0, abs(ev.max()))
    cov = (V[:, keep] / ev[keep]) @ V[:, keep].T
    null = V[:, ~keep]
    unidentified = np.any(np.abs(null) > 1e-8, axis=1) if null.size else np.zeros(k, bool)
    return cov, unidentified


def wald_ci(fit: CoxFit, alpha: float = 0.1):
    """Wald intervals ``beta_j -/+ z_{1-alpha/2} se_j``.

    Returns ``(intervals, flags)`` where ``flags[j]`` is True when coordinate
    ``j`` has no information and its interval is the whole real line.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    z = norm.ppf(1 - alpha / 2)
    cov, bad = covariance_from_information(fit.information)
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    intervals = []
    for j, b in enumerate(fit.beta):
        if bad[j] or not fit.converged:
            intervals.append((-np.inf, np.inf))
        else:
            intervals.append((b - z * se[j], b + z * se[j]))
    flags = bad | (not fit.converged)
    return intervals, np.asarray(flags, bool)


def breslow_baseline(data: SurvivalDataset, fit: CoxFit) -> BreslowBaseline:
    return breslow_from_beta(data, fit.beta, fit.subset)


def breslow_from_beta(data: SurvivalDataset, beta, subset=None) -> BreslowBaseline:
    subset = _as_subset(data, subset)
    beta = _check_beta(beta, subset)
    Xs, d = data._sorted
    eta = Xs[:, subset] @ beta if subset.size else np.zeros(data.n)
    risk = np.exp(_log_risk(eta))
    ts = data.time[data.order]
    ev = d > 0
    return BreslowBaseline(ts[ev], np.cumsum(1.0 / risk[ev]))


def survival_probability(baseline: BreslowBaseline, fit: CoxFit, x, t) -> float:
    """``S(t | x)`` where ``x`` is the full covariate vector."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    x = np.asarray(x, float)
    lp = x[fit.subset] @ fit.beta
    return float(np.exp(-baseline(t) * np.exp(lp)))


def predict_survival(baseline: BreslowBaseline, beta, subset, X, times) -> np.ndarray:
    """Survival matrix of shape ``(len(X), len(times))``."""
    lp = np.asarray(X, float)[:, subset] @ np.asarray(beta, float)
    H = baseline(np.asarray(times, float))
    return np.exp(-np.outer(np.exp(lp), H))
