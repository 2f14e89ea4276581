"""Compiled and fallback kernels must agree: SOR up to rounding, the Euler step bit for bit."""

import numpy as np
import pytest
import scipy.sparse as sp

from ldcontrol import kernels

needs_compiled = pytest.mark.skipif(kernels.BACKEND != "cython",
                                    reason="compiled extension not built")


def _poisson(n):
    T = sp.diags([-1, 2, -1], [-1, 0, 1], shape=(n, n))
    return (sp.kron(sp.identity(n), T) + sp.kron(T, sp.identity(n))).tocsr()


def test_sor_solves_poisson_fallback():
    A = _poisson(12)
    rhs = np.ones(A.shape[0])
    x, sweeps, res = kernels.sor_solve(A, rhs, omega=1.5, tol=1e-11, backend="python")
    assert res <= 1e-11
    np.testing.assert_allclose(A @ x, rhs, atol=1e-9)


@needs_compiled
@pytest.mark.parametrize("omega", [1.0, 1.7])
def test_sor_backends_identical(omega):
    A = _poisson(15)
    rhs = np.random.default_rng(0).normal(size=A.shape[0])
    xc, sc, rc = kernels.sor_solve(A, rhs, omega=omega, tol=1e-10, backend="cython")
    xp, sp_, rp = kernels.sor_solve(A, rhs, omega=omega, tol=1e-10, backend="python")
    # the fallback orders the row sums differently (triangular solve)
    assert abs(sc - sp_) <= 10
    np.testing.assert_allclose(xc, xp, rtol=0, atol=1e-9)
    assert rc <= 1e-10 and rp <= 1e-10


def _em_inputs(n, d, shape, with_s, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-0.4, 0.4, (n, d))
    B = rng.normal(size=(n, d)) * 50
    S = None
    if with_s:
        M = rng.normal(size=(n, d, d)) * 0.2
        S = np.ascontiguousarray(np.eye(d) + M @ np.swapaxes(M, 1, 2))
    xi = rng.normal(size=(n, d))
    G = rng.uniform(0, 1, n)
    center = np.zeros(d)
    lo, hi = -np.ones(d) * 0.6, np.ones(d) * 0.6
    if shape == 1:
        sd = np.linalg.norm(X, axis=1) - 0.7
    elif shape == 2:
        sd = np.abs(X).max(axis=1) - 0.6
    else:
        sd = np.zeros(n)
    live = np.ones(n, dtype=np.uint8)
    live[::7] = 0
    return dict(X=X, B=B, S=S, xi=xi, G=G, dt=1e-2, sqdt=0.1, clip_level=0.5, live=live,
                sd=sd, cost=np.zeros(n), disc=np.zeros(n), disc_factor=0.9, tau=np.zeros(n),
                clips=np.zeros(n, dtype=np.int64), supn=np.zeros(n), shape=shape,
                center=center, radius=0.7, lo=lo, hi=hi, out=np.zeros(n, dtype=np.uint8))


def _run_em(backend, **kw):
    kw = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in kw.items()}
    n_out = kernels.em_step(backend=backend, **kw)
    return n_out, kw


@needs_compiled
@pytest.mark.parametrize("shape", [0, 1, 2])
@pytest.mark.parametrize("with_s", [False, True])
@pytest.mark.parametrize("d", [2, 3])
def test_em_step_backends_identical(shape, with_s, d):
    kw = _em_inputs(200, d, shape, with_s)
    nc, c = _run_em("cython", **kw)
    np_, p = _run_em("python", **kw)
    assert nc == np_
    for key in ("X", "sd", "cost", "disc", "tau", "clips", "supn", "out"):
        assert np.array_equal(c[key], p[key]), key


def test_em_step_frozen_rows_untouched():
    kw = _em_inputs(50, 2, 1, False)
    _, p = _run_em("python", **kw)
    dead = kw["live"] == 0
    assert np.array_equal(p["X"][dead], kw["X"][dead])
    assert np.all(p["tau"][dead] == 0)


def test_em_step_exit_lands_on_boundary():
    kw = _em_inputs(300, 2, 1, False)
    n_out, p = _run_em("python", **kw)
    assert n_out > 0
    hit = p["out"].astype(bool)
    np.testing.assert_allclose(np.linalg.norm(p["X"][hit], axis=1), 0.7, atol=1e-12)
    assert np.all(p["tau"][hit] <= kw["dt"])


def test_em_step_clips_large_drift():
    kw = _em_inputs(20, 2, 0, False)
    kw["B"][:] = 1e6
    _, p = _run_em("python", **kw)
    assert np.all(p["clips"][kw["live"] == 1] == 1)
