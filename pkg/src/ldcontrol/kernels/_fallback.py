"""Pure-Python (numpy/scipy) versions of the compiled kernels.

The SOR sweep is written as a forward triangular solve, which visits rows in
the same order as the compiled loop.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular


def sup_residual(indptr, indices, data, rhs, x) -> float:
    n = rhs.shape[0]
    A = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    r = rhs - A @ x
    return float(np.max(np.abs(r))) if n else 0.0


def sor_solve(indptr, indices, data, rhs, x, omega, tol, max_sweeps, check_every=10):
    n = rhs.shape[0]
    A = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    diag = A.diagonal()
    lower = (sp.tril(A, k=-1) + sp.diags(diag / omega)).tocsr()
    upper = (sp.triu(A, k=1) + sp.diags((1.0 - 1.0 / omega) * diag)).tocsr()

    res = sup_residual(indptr, indices, data, rhs, x)
    sweep = 0
    while res > tol and sweep < max_sweeps:
        x[:] = spsolve_triangular(lower, rhs - upper @ x, lower=True)
        sweep += 1
        if sweep % check_every == 0 or sweep == max_sweeps:
            res = sup_residual(indptr, indices, data, rhs, x)
    return sweep, res


def _signed_distance(Y, shape, center, radius, lo, hi):
    d = Y.shape[1]
    if shape == 1:
        v = Y[:, 0] - center[0]
        s = v * v
        for j in range(1, d):
            v = Y[:, j] - center[j]
            s = s + v * v
        return np.sqrt(s) - radius
    q = np.abs(Y - (lo + hi) / 2) - (hi - lo) / 2
    p = np.maximum(q, 0.0)
    o = p[:, 0] * p[:, 0]
    for j in range(1, d):
        o = o + p[:, j] * p[:, j]
    return np.sqrt(o) + np.minimum(q.max(axis=1), 0.0)


def _project(Y, shape, center, radius, lo, hi):
    d = Y.shape[1]
    if shape == 1:
        v = Y - center
        s = v[:, 0] * v[:, 0]
        for j in range(1, d):
            s = s + v[:, j] * v[:, j]
        nrm = np.sqrt(s)
        u = v / np.where(nrm > 0, nrm, 1.0)[:, None]
        u[nrm == 0] = np.eye(d)[0]
        return center + radius * u
    inside = _signed_distance(Y, shape, center, radius, lo, hi) < 0
    P = np.clip(Y, lo, hi)
    if np.any(inside):
        Pi = P[inside]
        j = np.argmin(np.concatenate([Pi - lo, hi - Pi], axis=1), axis=1)
        rows = np.arange(Pi.shape[0])
        ax = j % d
        Pi[rows, ax] = np.where(j < d, lo[ax], hi[ax])
        P[inside] = Pi
    return P


def em_step(X, B, S, xi, G, dt, sqdt, clip_level, live, sd, cost, disc, disc_factor, tau,
            clips, supn, shape, center, radius, lo, hi, out):
    """Vectorized twin of the compiled step; same operation order."""
    d = X.shape[1]
    lv = live.astype(bool)
    disp = B * dt
    dn = disp[:, 0] * disp[:, 0]
    for j in range(1, d):
        dn = dn + disp[:, j] * disp[:, j]
    dn = np.sqrt(dn)
    hit = lv & (dn > clip_level)
    if np.any(hit):
        disp[hit] *= (clip_level / dn[hit])[:, None]
        clips += hit
    if S is None:
        inc = xi
    else:
        inc = np.empty_like(xi)
        for i in range(d):
            acc = S[:, i, 0] * xi[:, 0]
            for j in range(1, d):
                acc = acc + S[:, i, j] * xi[:, j]
            inc[:, i] = acc
    Xn = X + disp + sqdt * inc
    frac = np.where(lv, 1.0, 0.0)
    ex = np.zeros(lv.size, dtype=bool)
    if shape != 0:
        sd_new = _signed_distance(Xn, shape, center, radius, lo, hi)
        ex = lv & (sd_new >= 0)
        if np.any(ex):
            theta = sd[ex] / (sd[ex] - sd_new[ex])
            frac[ex] = theta
            cross = X[ex] + theta[:, None] * (Xn[ex] - X[ex])
            Xn[ex] = _project(cross, shape, center, radius, lo, hi)
        sd[lv] = sd_new[lv]
    w = frac * dt
    cost[lv] += (G * w)[lv]
    if disc is not None:
        disc[lv] += (disc_factor * G * w)[lv]
    tau[lv] += w[lv]
    X[lv] = Xn[lv]
    if supn is not None:
        s = Xn[:, 0] * Xn[:, 0]
        for j in range(1, d):
            s = s + Xn[:, j] * Xn[:, j]
        supn[lv] = np.maximum(supn[lv], np.sqrt(s)[lv])
    out[:] = ex
    return int(ex.sum())
