"""Numerical kernels with a compiled fast path.

The Cython extensions ``_sor`` (SOR sweeps) and ``_em`` (fused
Euler-Maruyama step) are used when they were built; otherwise the
numpy/scipy fallback in ``_fallback`` is selected. Setting the environment
variable ``LDCONTROL_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import os

import numpy as np
import scipy.sparse as sp

from . import _fallback

_force_py = os.environ.get("LDCONTROL_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_py:
        raise ImportError("pure-python backend requested")
    from . import _em as _em_impl
    from . import _sor as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _em_impl = _fallback
    BACKEND = "python"


def _pick(compiled, backend):
    if backend == "python":
        return _fallback
    if backend == "cython" and BACKEND != "cython":
        raise RuntimeError("compiled backend is not available")
    return compiled


def _csr_parts(A):
    A = sp.csr_matrix(A)
    A.sort_indices()
    return (
        np.ascontiguousarray(A.indptr, dtype=np.int32),
        np.ascontiguousarray(A.indices, dtype=np.int32),
        np.ascontiguousarray(A.data, dtype=np.float64),
    )


def sor_solve(A, rhs, x0=None, *, omega=1.0, tol=1e-10, max_sweeps=100_000,
              check_every=10, backend=None):
    """Solve ``A x = rhs`` by SOR sweeps in natural row order.

    Returns ``(x, sweeps, sup_residual)``. ``backend`` may be ``"cython"`` or
    ``"python"`` to override the import-time choice.
    """
    impl = _pick(_impl, backend)
    rhs = np.ascontiguousarray(rhs, dtype=np.float64)
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=np.float64, copy=True)
    indptr, indices, data = _csr_parts(A)
    sweeps, res = impl.sor_solve(indptr, indices, data, rhs, x, float(omega),
                                 float(tol), int(max_sweeps), int(check_every))
    return x, int(sweeps), float(res)


def sup_residual(A, rhs, x, backend=None):
    impl = _pick(_impl, backend)
    indptr, indices, data = _csr_parts(A)
    return float(impl.sup_residual(indptr, indices, data,
                                   np.ascontiguousarray(rhs, dtype=np.float64),
                                   np.ascontiguousarray(x, dtype=np.float64)))


def em_step(X, B, S, xi, G, dt, sqdt, clip_level, live, sd, cost, disc, disc_factor, tau,
            clips, supn, shape, center, radius, lo, hi, out, backend=None):
    """One Euler-Maruyama step for every live row, updating arrays in place.

    ``shape`` is 0 (no domain), 1 (ball: ``center``, ``radius``) or 2 (box:
    ``lo``, ``hi``). Rows whose signed distance becomes non-negative are
    moved to the projected crossing point, flagged in ``out`` and charged the
    interpolated fraction of the step. Returns the number of exits.
    """
    impl = _pick(_em_impl, backend)
    return int(impl.em_step(X, B, S, xi, G, float(dt), float(sqdt), float(clip_level), live,
                            sd, cost, disc, float(disc_factor), tau, clips, supn, int(shape),
                            center, float(radius), lo, hi, out))


__all__ = ["BACKEND", "em_step", "sor_solve", "sup_residual"]
