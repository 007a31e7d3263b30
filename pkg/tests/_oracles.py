"""Slow, independent reference computations used as test oracles.

Nothing here imports the package's numerical kernels: these are direct
transcriptions of the textbook formulas, written for clarity not speed.
"""

from __future__ import annotations

import numpy as np

from coxsi.survival_core import SurvivalDataset


def naive_loglik(time, status, X, beta):
    """Double-loop log partial likelihood with risk sets ``{j : Y_j >= Y_i}``."""
    eta = X @ beta
    total = 0.0
    for i in range(len(time)):
        if status[i] != 1:
            continue
        denom = sum(np.exp(eta[j]) for j in range(len(time)) if time[j] >= time[i])
        total += eta[i] - np.log(denom)
    return float(total)


def fd_gradient(f, x, h=1e-5):
    x = np.asarray(x, float)
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_jacobian(f, x, h=1e-5):
    x = np.asarray(x, float)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.column_stack(cols)


def grid_maximize_2d(f, lo=-5.0, hi=5.0, points=41, rounds=12, shrink=4.0):
    """Nested grid refinement for a 2-d concave function."""
    cx = cy = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    best = None
    for _ in range(rounds):
        xs = np.linspace(cx - half, cx + half, points)
        ys = np.linspace(cy - half, cy + half, points)
        vals = np.array([[f(np.array([a, b])) for b in ys] for a in xs])
        i, j = np.unravel_index(np.argmax(vals), vals.shape)
        cx, cy = xs[i], ys[j]
        best = (np.array([cx, cy]), vals[i, j])
        half = max(half / shrink, 2 * (xs[1] - xs[0]))
    return best


def random_dataset(rng, n, p, censor=0.3, scale=1.0, beta=None):
    X = rng.normal(size=(n, p)) * scale
    beta = rng.normal(scale=0.5, size=p) if beta is None else np.asarray(beta, float)
    T = rng.exponential(size=n) / np.exp(X @ beta)
    status = (rng.uniform(size=n) > censor).astype(int)
    if status.sum() == 0:
        status[0] = 1
    return SurvivalDataset(T, status, X)
