# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused Euler-Maruyama step with exit detection.

Operation order mirrors ``_fallback.em_step`` exactly so both backends give
bit-identical paths (the extension is built with ``-ffp-contract=off``).
"""

from libc.math cimport sqrt, fabs

cdef inline double _sd(const double* x, int d, int shape, const double* c, double radius,
                       const double* lo, const double* hi) noexcept nogil:
    cdef double s = 0.0, q, o = 0.0, qmax, v
    cdef int j
    if shape == 1:
        v = x[0] - c[0]
        s = v * v
        for j in range(1, d):
            v = x[j] - c[j]
            s = s + v * v
        return sqrt(s) - radius
    # box
    qmax = -1e308
    for j in range(d):
        q = fabs(x[j] - (lo[j] + hi[j]) / 2) - (hi[j] - lo[j]) / 2
        if q > qmax:
            qmax = q
        v = q if q > 0.0 else 0.0
        if j == 0:
            o = v * v
        else:
            o = o + v * v
    return sqrt(o) + (qmax if qmax < 0.0 else 0.0)


cdef inline void _project(double* x, int d, int shape, const double* c, double radius,
                          const double* lo, const double* hi) noexcept nogil:
    cdef double s, v, nrm, best, dist
    cdef int j, jbest, inside
    if shape == 1:
        v = x[0] - c[0]
        s = v * v
        for j in range(1, d):
            v = x[j] - c[j]
            s = s + v * v
        nrm = sqrt(s)
        if nrm > 0:
            for j in range(d):
                x[j] = c[j] + radius * ((x[j] - c[j]) / nrm)
        else:
            x[0] = c[0] + radius * 1.0
            for j in range(1, d):
                x[j] = c[j] + radius * 0.0
        return
    inside = _sd(x, d, shape, c, radius, lo, hi) < 0
    for j in range(d):
        if x[j] < lo[j]:
            x[j] = lo[j]
        elif x[j] > hi[j]:
            x[j] = hi[j]
    if inside:
        best = 1e308
        jbest = 0
        for j in range(2 * d):
            if j < d:
                dist = x[j] - lo[j]
            else:
                dist = hi[j - d] - x[j - d]
            if dist < best:
                best = dist
                jbest = j
        if jbest < d:
            x[jbest] = lo[jbest]
        else:
            x[jbest - d] = hi[jbest - d]


def em_step(double[:, ::1] X, const double[:, ::1] B, S, const double[:, ::1] xi,
            const double[::1] G, double dt, double sqdt, double clip_level,
            unsigned char[::1] live, double[::1] sd, double[::1] cost, disc,
            double disc_factor, double[::1] tau, long long[::1] clips, supn,
            int shape, const double[::1] center, double radius, const double[::1] lo,
            const double[::1] hi, unsigned char[::1] out):
    """Advance every live row one step; returns the number of rows that exited."""
    cdef Py_ssize_t n = X.shape[0], i
    cdef int d = X.shape[1], j, k
    cdef double[:, :, ::1] Sv
    cdef double[::1] discv
    cdef double[::1] supv
    cdef bint has_s = S is not None, has_disc = disc is not None, has_sup = supn is not None
    cdef double disp[16]
    cdef double xn[16]
    cdef double xo[16]
    cdef double dn, scale, acc, sdn, theta, frac, w, s
    cdef Py_ssize_t n_out = 0
    if d > 16:
        raise ValueError("em_step supports at most 16 dimensions")
    if has_s:
        Sv = S
    if has_disc:
        discv = disc
    if has_sup:
        supv = supn
    with nogil:
        for i in range(n):
            out[i] = 0
            if not live[i]:
                continue
            for j in range(d):
                disp[j] = B[i, j] * dt
            dn = disp[0] * disp[0]
            for j in range(1, d):
                dn = dn + disp[j] * disp[j]
            dn = sqrt(dn)
            if dn > clip_level:
                scale = clip_level / dn
                for j in range(d):
                    disp[j] = disp[j] * scale
                clips[i] += 1
            for j in range(d):
                if has_s:
                    acc = Sv[i, j, 0] * xi[i, 0]
                    for k in range(1, d):
                        acc = acc + Sv[i, j, k] * xi[i, k]
                else:
                    acc = xi[i, j]
                xo[j] = X[i, j]
                xn[j] = xo[j] + disp[j] + sqdt * acc
            frac = 1.0
            if shape != 0:
                sdn = _sd(xn, d, shape, &center[0], radius, &lo[0], &hi[0])
                if sdn >= 0:
                    theta = sd[i] / (sd[i] - sdn)
                    frac = theta
                    for j in range(d):
                        xn[j] = xo[j] + theta * (xn[j] - xo[j])
                    _project(xn, d, shape, &center[0], radius, &lo[0], &hi[0])
                    out[i] = 1
                    n_out += 1
                sd[i] = sdn
            w = frac * dt
            cost[i] += G[i] * w
            if has_disc:
                discv[i] += disc_factor * G[i] * w
            tau[i] += w
            s = xn[0] * xn[0]
            for j in range(d):
                X[i, j] = xn[j]
                if j > 0:
                    s = s + xn[j] * xn[j]
            if has_sup:
                s = sqrt(s)
                if s > supv[i]:
                    supv[i] = s
    return n_out
