"""Exact linear-time proximal operators for 1D total variation on a chain.

Conventions, shared by the ADMM solver::

    tv1_prox(y, lam) = argmin_z  1/2 ||z - y||^2 + lam * sum_i w_i |z_{i+1} - z_i|
    tv2_prox(y, lam) = argmin_z  1/2 ||z - y||^2 + lam/2 * sum_i w_i (z_{i+1} - z_i)^2

so ``tv2_prox`` solves ``(I + lam * L_w) z = y`` with ``L_w`` the weighted
chain Laplacian.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _tv1_dp(y, lam, out):
    # Johnson (2013) dynamic program; lam[k] weights the edge (k, k+1).
    n = y.shape[0]
    if n == 1:
        out[0] = y[0]
        return
    x = np.empty(2 * n)
    a = np.empty(2 * n)
    b = np.empty(2 * n)
    tm = np.empty(n - 1)
    tp = np.empty(n - 1)

    lk = lam[0]
    tm[0] = y[0] - lk
    tp[0] = y[0] + lk
    l = n - 1
    r = n
    x[l] = tm[0]
    x[r] = tp[0]
    a[l] = 1.0
    b[l] = -y[0] + lk
    a[r] = -1.0
    b[r] = y[0] + lk
    afirst = 1.0
    bfirst = -lk - y[1]
    alast = -1.0
    blast = -lk + y[1]

    for k in range(1, n - 1):
        lk = lam[k]
        lo = l
        while lo <= r and afirst * x[lo] + bfirst <= -lk:
            afirst += a[lo]
            bfirst += b[lo]
            lo += 1
        hi = r
        while hi >= lo and -alast * x[hi] - blast >= lk:
            alast += a[hi]
            blast += b[hi]
            hi -= 1
        tm[k] = (-lk - bfirst) / afirst
        l = lo - 1
        x[l] = tm[k]
        tp[k] = (lk + blast) / (-alast)
        r = hi + 1
        x[r] = tp[k]
        a[l] = afirst
        b[l] = bfirst + lk
        a[r] = alast
        b[r] = blast + lk
        afirst = 1.0
        bfirst = -lk - y[k + 1]
        alast = -1.0
        blast = -lk + y[k + 1]

    lo = l
    while lo <= r and afirst * x[lo] + bfirst <= 0.0:
        afirst += a[lo]
        bfirst += b[lo]
        lo += 1
    out[n - 1] = -bfirst / afirst
    for k in range(n - 2, -1, -1):
        if out[k + 1] > tp[k]:
            out[k] = tp[k]
        elif out[k + 1] < tm[k]:
            out[k] = tm[k]
        else:
            out[k] = out[k + 1]


@njit(cache=True, nogil=True)
def _tv2_thomas(y, lam, out):
    # (I + L_w) z = y with edge weights lam; symmetric tridiagonal, diagonally dominant.
    n = y.shape[0]
    if n == 1:
        out[0] = y[0]
        return
    c = np.empty(n - 1)
    d = np.empty(n)
    diag = 1.0 + lam[0]
    c[0] = -lam[0] / diag
    d[0] = y[0] / diag
    for i in range(1, n):
        diag = 1.0 + lam[i - 1]
        if i < n - 1:
            diag += lam[i]
        denom = diag + lam[i - 1] * c[i - 1]
        if i < n - 1:
            c[i] = -lam[i] / denom
        d[i] = (y[i] + lam[i - 1] * d[i - 1]) / denom
    out[n - 1] = d[n - 1]
    for i in range(n - 2, -1, -1):
        out[i] = d[i] - c[i] * out[i + 1]


@njit(cache=True, nogil=True)
def tv1_trails(values, offsets, lam, out):
    """Apply the l1 prox to each trail segment ``values[offsets[j]:offsets[j+1]]``."""
    for j in range(offsets.shape[0] - 1):
        s, e = offsets[j], offsets[j + 1]
        w = np.full(max(e - s - 1, 1), lam[j])
        _tv1_dp(values[s:e], w, out[s:e])


@njit(cache=True, nogil=True)
def tv2_trails(values, offsets, lam, out):
    """Apply the l2 prox to each trail segment ``values[offsets[j]:offsets[j+1]]``."""
    for j in range(offsets.shape[0] - 1):
        s, e = offsets[j], offsets[j + 1]
        w = np.full(max(e - s - 1, 1), lam[j])
        _tv2_thomas(values[s:e], w, out[s:e])


def _edge_weights(n, lam, weights):
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if weights is None:
        return np.full(max(n - 1, 1), float(lam))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (max(n - 1, 0),):
        raise ValueError(f"expected {n - 1} edge weights, got {weights.shape}")
    if np.any(weights < 0):
        raise ValueError("edge weights must be non-negative")
    return lam * weights if n > 1 else np.zeros(1)


def tv1_prox(y, lam: float, weights=None) -> np.ndarray:
    """Fused-lasso (l1 total variation) prox on a chain, exact in O(n).

    >>> tv1_prox([0.0, 4.0], 1.0)
    array([1., 3.])
    """
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("y must be a non-empty vector")
    out = np.empty_like(y)
    _tv1_dp(y, _edge_weights(y.size, lam, weights), out)
    return out


def tv2_prox(y, lam: float, weights=None) -> np.ndarray:
    """Squared-difference (Laplacian) prox on a chain via tridiagonal elimination."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("y must be a non-empty vector")
    out = np.empty_like(y)
    _tv2_thomas(y, _edge_weights(y.size, lam, weights), out)
    return out


def total_variation(z, p: int) -> float:
    d = np.diff(np.asarray(z, dtype=np.float64))
    return float(np.sum(np.abs(d) ** p))
