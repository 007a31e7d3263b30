"""Simulated survival data: toy Cox designs and designs calibrated to a real cohort."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy.optimize import minimize

from .survival_core import SurvivalDataset, fit_cox_mle

PATTERNS = {
    "sparse": (1.0, 1.0),
    "realistic": (0.8, 0.7, 0.5, 0.8),
    "highcontrast": (0.3, 1.0, 0.3, 1.0),
}

EPS_EVENT = 1e-8
EPS_CENSOR = 5e-9


@dataclass(frozen=True)
class CoefficientPattern:
    kind: str
    values: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("allones", "custom", *PATTERNS):
            raise ValueError(f"unknown coefficient pattern {self.kind!r}")
        if self.kind == "custom" and self.values is None:
            raise ValueError("custom pattern needs values")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str = "weibull"
    shape: float = 2.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("exponential", "weibull"):
            raise ValueError(f"unknown baseline {self.kind!r}")
        if self.shape <= 0 or self.scale <= 0:
            raise ValueError("Weibull shape and scale must be positive")

    @classmethod
    def parse(cls, spec) -> "BaselineSpec":
        if isinstance(spec, BaselineSpec):
            return spec
        if isinstance(spec, dict):
            return cls(**spec)
        if spec == "exponential":
            return cls("exponential", 1.0, 1.0)
        return cls(str(spec))


@dataclass(frozen=True)
class ToyScenario:
    n: int
    p: int
    rho: float = 0.0
    censor_target: float = 0.0
    baseline: BaselineSpec = field(default_factory=BaselineSpec)
    pattern: Union[str, CoefficientPattern] = "realistic"
    dichotomize: tuple = ()

    def __post_init__(self):
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if not 0 <= self.censor_target < 1:
            raise ValueError("censor_target must lie in [0, 1)")
        object.__setattr__(self, "baseline", BaselineSpec.parse(self.baseline))
        if isinstance(self.pattern, str):
            object.__setattr__(self, "pattern", CoefficientPattern(self.pattern))
        object.__setattr__(self, "dichotomize", tuple(int(j) for j in self.dichotomize))

    @property
    def beta(self) -> np.ndarray:
        return make_beta(self.pattern, self.p)

    @property
    def scenario_id(self) -> str:
        b = self.baseline
        base = "exp" if b.kind == "exponential" else f"weib{b.shape:g}-{b.scale:g}"
        sid = (f"toy_n{self.n}_p{self.p}_rho{self.rho:g}_c{self.censor_target:g}"
               f"_{base}_{self.pattern.kind}")
        if self.pattern.kind == "custom":
            sid += "-" + _short_hash(self.pattern.values)
        if self.dichotomize:
            sid += "_d" + "-".join(str(j) for j in self.dichotomize)
        return sid

    def describe(self) -> dict:
        return {
            "n": self.n, "p": self.p, "rho": self.rho, "censor_target": self.censor_target,
            "baseline": self.baseline.kind, "pattern": self.pattern.kind,
        }


@dataclass(frozen=True, eq=False)
class CalibratedScenario:
    covariate_pool: np.ndarray
    beta_truth: np.ndarray
    baseline: BaselineSpec
    censor_target: float = 0.0
    n: int = 200
    names: Optional[tuple] = None
    label: str = "calibrated"

    def __post_init__(self):
        pool = np.asarray(self.covariate_pool, float)
        if np.any(pool.std(axis=0) < 1e-12):
            raise ValueError("covariate pool has constant columns")
        object.__setattr__(self, "covariate_pool", pool)
        object.__setattr__(self, "beta_truth", np.asarray(self.beta_truth, float))
        object.__setattr__(self, "baseline", BaselineSpec.parse(self.baseline))

    @property
    def p(self) -> int:
        return self.covariate_pool.shape[1]

    @property
    def beta(self) -> np.ndarray:
        return self.beta_truth

    @property
    def rho(self):
        return float("nan")

    @property
    def scenario_id(self) -> str:
        h = _short_hash((self.covariate_pool.tobytes(), self.beta_truth.tobytes(),
                         self.baseline.shape, self.baseline.scale))
        return f"{self.label}_{h}_n{self.n}_c{self.censor_target:g}"

    def describe(self) -> dict:
        return {
            "n": self.n, "p": self.p, "rho": "", "censor_target": self.censor_target,
            "baseline": "weibull", "pattern": self.label,
        }

    def with_design(self, n: int, censor_target: float) -> "CalibratedScenario":
        return CalibratedScenario(self.covariate_pool, self.beta_truth, self.baseline,
                                  censor_target, n, self.names, self.label)

    def to_json(self) -> dict:
        return {
            "kind": "calibrated", "label": self.label,
            "names": list(self.names) if self.names else None,
            "beta_truth": self.beta_truth.tolist(),
            "baseline": {"kind": "weibull", "shape": self.baseline.shape, "scale": self.baseline.scale},
            "covariate_pool": self.covariate_pool.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict, n: int = 200, censor_target: float = 0.0) -> "CalibratedScenario":
        return cls(np.asarray(obj["covariate_pool"]), np.asarray(obj["beta_truth"]),
                   BaselineSpec.parse(obj["baseline"]), censor_target, n,
                   tuple(obj["names"]) if obj.get("names") else None, obj.get("label", "calibrated"))


def _short_hash(obj) -> str:
    return hashlib.sha256(repr(obj).encode()).hexdigest()[:10]


def make_beta(pattern, p: int) -> np.ndarray:
    if isinstance(pattern, str):
        pattern = CoefficientPattern(pattern)
    if pattern.kind == "allones":
        return np.ones(p)
    head = pattern.values if pattern.kind == "custom" else PATTERNS[pattern.kind]
    head = np.asarray(head, float)
    nz = np.flatnonzero(head)
    if nz.size and p < nz[-1] + 1:
        raise ValueError(f"pattern {pattern.kind} needs p >= {nz[-1] + 1}")
    out = np.zeros(p)
    k = min(p, head.size)
    out[:k] = head[:k]
    return out


def ar1_covariance(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def sample_covariates(n: int, p: int, rho: float, rng) -> np.ndarray:
    if not 0 <= rho < 1:
        raise ValueError("rho must lie in [0, 1)")
    L = np.linalg.cholesky(ar1_covariance(p, rho))
    return rng.standard_normal((n, p)) @ L.T


def dichotomize(X: np.ndarray, indices: Sequence[int]) -> np.ndarray:
    X = np.array(X, dtype=float, copy=True)
    for j in indices:
        X[:, j] = (X[:, j] > 0).astype(float)
    return X


def event_times_from_uniform(u, linear_predictors, baseline: BaselineSpec) -> np.ndarray:
    """Inverse-transform event times for ``H0(t) = s t^k``; exponential is ``k = s = 1``."""
    u = np.asarray(u, float)
    base = -np.log(u) / np.exp(np.asarray(linear_predictors, float))
    if baseline.kind == "exponential":
        return base
    return (base / baseline.scale) ** (1.0 / baseline.shape)


def sample_event_times(linear_predictors, baseline: BaselineSpec, rng) -> np.ndarray:
    lp = np.asarray(linear_predictors, float)
    u = rng.random(lp.shape)
    while np.any(u == 0):
        bad = u == 0
        u[bad] = rng.random(int(bad.sum()))
    return event_times_from_uniform(u, lp, baseline)


def apply_admin_censoring(event_times, censor_target: float):
    """Administrative censoring at the empirical ``(1 - censor_target)`` quantile."""
    if not 0 <= censor_target < 1:
        raise ValueError("censor_target must lie in [0, 1)")
    T = np.asarray(event_times, float)
    cutoff = float(np.quantile(T, 1 - censor_target))
    return np.minimum(T, cutoff), (T <= cutoff).astype(int), cutoff


def jitter_ties(times, role: str = "event") -> np.ndarray:
    """Break ties by deterministic offsets ``k * eps * range`` within each group of equal values."""
    eps = {"event": EPS_EVENT, "censoring": EPS_CENSOR}[role]
    t = np.asarray(times, float).copy()
    if t.size < 2:
        return t
    vals, inv, counts = np.unique(t, return_inverse=True, return_counts=True)
    if np.all(counts == 1):
        return t
    rng_ = float(t.max() - t.min())
    used = set(vals.tolist())
    for g in np.flatnonzero(counts > 1):
        members = np.flatnonzero(inv == g)
        v = vals[g]
        scale = rng_ if rng_ > 0 else max(1.0, abs(v))
        for k, i in enumerate(members[1:], start=1):
            cand = v + k * eps * scale
            while cand in used:
                cand = np.nextafter(cand, np.inf)
            used.add(cand)
            t[i] = cand
    return t


def break_ties(Y, status):
    """Jitter duplicated event and censoring times, keeping events before censorings at a tie."""
    Y = np.asarray(Y, float).copy()
    status = np.asarray(status, int)
    ev = status == 1
    Y[ev] = jitter_ties(Y[ev], "event")
    Y[~ev] = jitter_ties(Y[~ev], "censoring")
    if len(np.unique(Y)) < Y.size:
        rng_ = float(Y.max() - Y.min()) or 1.0
        used = set(Y[ev].tolist())
        for i in np.flatnonzero(~ev)[np.argsort(Y[~ev], kind="stable")]:
            v = Y[i]
            while v in used:
                v = max(v + EPS_CENSOR * rng_, np.nextafter(v, np.inf))
            used.add(v)
            Y[i] = v
    return Y


def generate(scenario, rng, n: Optional[int] = None, censor: bool = True) -> SurvivalDataset:
    """Draw one dataset (unstandardised) from a toy or calibrated scenario."""
    n = scenario.n if n is None else n
    if isinstance(scenario, CalibratedScenario):
        rows = rng.integers(0, scenario.covariate_pool.shape[0], size=n)
        X = scenario.covariate_pool[rows]
    else:
        X = sample_covariates(n, scenario.p, scenario.rho, rng)
        if scenario.dichotomize:
            X = dichotomize(X, scenario.dichotomize)
    T = sample_event_times(X @ scenario.beta, scenario.baseline, rng)
    if censor:
        Y, status, _ = apply_admin_censoring(T, scenario.censor_target)
    else:
        Y, status = T, np.ones(n, int)
    return SurvivalDataset(break_ties(Y, status), status, X)


# --- calibration -------------------------------------------------------------

def clean_design(X: np.ndarray, names=None, rare_threshold: float = 0.01):
    """Drop constant columns and rare 0/1 dummies; return kept matrix, names and mask."""
    X = np.asarray(X, float)
    names = list(names) if names is not None else [f"X{j + 1}" for j in range(X.shape[1])]
    keep = np.ones(X.shape[1], bool)
    for j in range(X.shape[1]):
        col = X[:, j]
        if col.std() < 1e-12:
            keep[j] = False
            continue
        if np.all(np.isin(col, (0.0, 1.0))):
            frac = col.mean()
            if min(frac, 1 - frac) < rare_threshold:
                keep[j] = False
    return X[:, keep], [nm for nm, k in zip(names, keep) if k], keep


def weibull_ph_negloglik(params, time, status, X):
    """Negative log-likelihood and gradient of a Weibull PH model in ``(log k, log s, beta)``."""
    logk, logs = params[0], params[1]
    beta = params[2:]
    k, s = np.exp(logk), np.exp(logs)
    lp = X @ beta if X.shape[1] else np.zeros(len(time))
    logt = np.log(time)
    cumhaz = s * np.exp(k * logt + lp)
    ll = np.sum(status * (logs + logk + (k - 1) * logt + lp)) - np.sum(cumhaz)
    g_logk = np.sum(status * (1 + k * logt)) - np.sum(cumhaz * k * logt)
    g_logs = np.sum(status) - np.sum(cumhaz)
    g_beta = X.T @ (status - cumhaz) if X.shape[1] else np.zeros(0)
    return -ll, -np.concatenate([[g_logk, g_logs], g_beta])


def fit_weibull_ph(time, status, X):
    X = np.asarray(X, float).reshape(len(time), -1)
    time = np.asarray(time, float)
    status = np.asarray(status, float)
    x0 = np.zeros(2 + X.shape[1])
    x0[1] = np.log(max(status.sum(), 1.0) / np.sum(time))
    res = minimize(weibull_ph_negloglik, x0, args=(time, status, X), jac=True, method="BFGS",
                   options={"gtol": 1e-8, "maxiter": 5000})
    if not res.success and np.max(np.abs(res.jac)) > 1e-4 * max(1.0, abs(res.fun)):
        raise RuntimeError(f"Weibull PH fit did not converge: {res.message}; |grad|={np.max(np.abs(res.jac)):.3g}")
    return float(np.exp(res.x[0])), float(np.exp(res.x[1])), res.x[2:]


def calibrate_from_dataset(real: SurvivalDataset, rare_threshold: float = 0.01,
                           label: str = "calibrated") -> CalibratedScenario:
    """Fit a Weibull PH model to cleaned, standardised data and freeze it as a scenario."""
    Xc, names, _ = clean_design(real.X, real.names, rare_threshold)
    Xc = (Xc - Xc.mean(axis=0)) / Xc.std(axis=0)
    k, s, beta = fit_weibull_ph(real.time, real.status, Xc)
    return CalibratedScenario(Xc, beta, BaselineSpec("weibull", k, s), 0.0, real.n, tuple(names), label)


# --- submodel truth ----------------------------------------------------------

_TRUTH_CACHE: dict = {}


def _truth_id(scenario) -> str:
    # the population projection does not depend on n or the censoring level
    if isinstance(scenario, CalibratedScenario):
        return scenario.with_design(0, 0.0).scenario_id
    return replace(scenario, n=0, censor_target=0.0).scenario_id


def submodel_truth(scenario, subset, n_pop: int = 200_000, cache: Optional[dict] = None,
                   seed: int = 0) -> np.ndarray:
    """Population coefficients of the Cox submodel on ``subset``.

    A subset that contains every truly active covariate is correctly specified,
    so its projection is the true coefficient vector restricted to it.
    Otherwise the submodel is fitted on one large uncensored population drawn
    with a seed derived from ``(seed, scenario id)``.
    """
    subset = np.atleast_1d(np.asarray(subset, int))
    if subset.size == 0:
        raise ValueError("subset must be nonempty")
    beta0 = scenario.beta
    if set(np.flatnonzero(beta0)).issubset(subset.tolist()):
        return beta0[subset].copy()
    cache = _TRUTH_CACHE if cache is None else cache
    sid = _truth_id(scenario)
    key = (sid, tuple(subset.tolist()), n_pop, seed)
    if key not in cache:
        pkey = (sid, n_pop, seed, "population")
        if pkey not in cache:
            # keep a single population in memory
            for old in [k for k in cache if k[-1] == "population"]:
                del cache[old]
            ss = np.random.SeedSequence([seed, int(_short_hash(sid), 16)])
            pop = generate(scenario, np.random.default_rng(ss), n=n_pop, censor=False)
            cache[pkey] = pop
        fit = fit_cox_mle(cache[pkey], subset)
        if not fit.converged:
            raise RuntimeError(f"population submodel fit failed for subset {subset.tolist()}")
        cache[key] = fit.beta
    return cache[key].copy()
