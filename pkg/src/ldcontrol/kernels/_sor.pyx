# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled SOR sweeps on CSR matrices.

Rows are visited in increasing index order, so results are deterministic and
match the scipy fallback up to floating-point rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


cdef double _sup_residual(const cnp.int32_t[::1] indptr,
                          const cnp.int32_t[::1] indices,
                          const double[::1] data,
                          const double[::1] rhs,
                          const double[::1] x) noexcept nogil:
    cdef Py_ssize_t n = rhs.shape[0]
    cdef Py_ssize_t i, jj
    cdef double s, r = 0.0
    for i in range(n):
        s = rhs[i]
        for jj in range(indptr[i], indptr[i + 1]):
            s -= data[jj] * x[indices[jj]]
        if fabs(s) > r:
            r = fabs(s)
    return r


def sup_residual(indptr, indices, data, rhs, x):
    """Return max_i |rhs_i - (A x)_i| for a CSR matrix."""
    cdef const cnp.int32_t[::1] ip = indptr
    cdef const cnp.int32_t[::1] ix = indices
    cdef const double[::1] dv = data
    cdef const double[::1] b = rhs
    cdef const double[::1] xv = x
    cdef double r
    with nogil:
        r = _sup_residual(ip, ix, dv, b, xv)
    return r


def sor_solve(indptr, indices, data, rhs, double[::1] x, double omega,
              double tol, Py_ssize_t max_sweeps, Py_ssize_t check_every=10):
    """In-place SOR on ``A x = rhs``; returns ``(sweeps, sup_residual)``."""
    cdef const cnp.int32_t[::1] ip = indptr
    cdef const cnp.int32_t[::1] ix = indices
    cdef const double[::1] dv = data
    cdef const double[::1] b = rhs
    cdef Py_ssize_t n = b.shape[0]
    cdef Py_ssize_t i, jj, j, sweep = 0
    cdef double s, diag, res
    cdef double one_minus = 1.0 - omega

    if x.shape[0] != n:
        raise ValueError("x and rhs lengths differ")

    with nogil:
        res = _sup_residual(ip, ix, dv, b, x)
        while res > tol and sweep < max_sweeps:
            for i in range(n):
                s = b[i]
                diag = 0.0
                for jj in range(ip[i], ip[i + 1]):
                    j = ix[jj]
                    if j == i:
                        diag = dv[jj]
                    else:
                        s -= dv[jj] * x[j]
                x[i] = one_minus * x[i] + omega * s / diag
            sweep += 1
            if sweep % check_every == 0 or sweep == max_sweeps:
                res = _sup_residual(ip, ix, dv, b, x)
    return sweep, res
