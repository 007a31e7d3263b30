"""Compiled inner loops."""

import numpy as np
from numba import njit


@njit(cache=True)
def soft_threshold(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True)
def cd_quadratic(b0, g, H, pen, tol, max_sweeps):
    """Maximise ``g'(b-b0) - (b-b0)'H(b-b0)/2 - sum pen_j |b_j|`` by cyclic coordinate descent.

    Coordinates with ``H_jj <= 0`` carry no curvature and are set to zero.
    """
    k = b0.shape[0]
    b = b0.copy()
    # r = gradient of the smooth quadratic part at b
    r = g.copy()
    for _ in range(max_sweeps):
        max_delta = 0.0
        for j in range(k):
            hjj = H[j, j]
            if hjj <= 1e-14:
                new = 0.0
            else:
                new = soft_threshold(hjj * b[j] + r[j], pen[j]) / hjj
            delta = new - b[j]
            if delta != 0.0:
                for i in range(k):
                    r[i] -= H[i, j] * delta
                b[j] = new
                ad = abs(delta)
                if ad > max_delta:
                    max_delta = ad
        if max_delta < tol:
            break
    return b


@njit(cache=True)
def cox_loglik(X, d, beta):
    """Log partial likelihood for rows sorted by increasing time."""
    n, k = X.shape
    eta = X @ beta
    acc = -np.inf
    ll = 0.0
    for i in range(n - 1, -1, -1):
        e = eta[i]
        if acc == -np.inf:
            acc = e
        elif e > acc:
            acc = e + np.log1p(np.exp(acc - e))
        else:
            acc = acc + np.log1p(np.exp(e - acc))
        if d[i] > 0:
            ll += e - acc
    return ll


@njit(cache=True)
def cox_derivatives(X, d, beta, want_info):
    """Log-likelihood, score and information for rows sorted by increasing time.

    Returns ``ok=False`` when a risk-set sum underflows after shifting by the
    largest linear predictor; callers then fall back to per-risk-set softmax.
    """
    n, k = X.shape
    eta = X @ beta
    c = eta.max()
    w = np.exp(eta - c)
    s0 = np.empty(n)
    s1 = np.zeros((n, k))
    acc0 = 0.0
    acc1 = np.zeros(k)
    for i in range(n - 1, -1, -1):
        acc0 += w[i]
        s0[i] = acc0
        for a in range(k):
            acc1[a] += w[i] * X[i, a]
            s1[i, a] = acc1[a]
    ll = 0.0
    score = np.zeros(k)
    info = np.zeros((k, k))
    ok = True
    cum = 0.0
    for i in range(n):
        if d[i] > 0:
            if s0[i] <= 0.0:
                ok = False
                break
            ll += eta[i] - c - np.log(s0[i])
            cum += 1.0 / s0[i]
            inv = 1.0 / s0[i]
            for a in range(k):
                ma = s1[i, a] * inv
                score[a] += X[i, a] - ma
                if want_info:
                    for b in range(a + 1):
                        info[a, b] -= ma * s1[i, b] * inv
        if want_info:
            wc = w[i] * cum
            if wc != 0.0:
                for a in range(k):
                    xa = wc * X[i, a]
                    for b in range(a + 1):
                        info[a, b] += xa * X[i, b]
    if want_info:
        for a in range(k):
            for b in range(a):
                info[b, a] = info[a, b]
    return ok, ll, score, info
