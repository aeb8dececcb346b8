# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, fmax

cnp.import_array()


cdef inline double _cell_total(double lam, const double[:] rate, const double[:] extra,
                               const unsigned char[:] active, const double[:] kink,
                               double v, double gamma, double theta, double[:] out) noexcept nogil:
    cdef Py_ssize_t n
    cdef double inv = 1.0 / (gamma * lam)
    cdef double off, above, below, t, s = 0.0
    for n in range(rate.shape[0]):
        if not active[n]:
            out[n] = 0.0
            continue
        off = theta / rate[n]
        above = v * inv - off
        if above >= kink[n]:
            t = above
        else:
            below = (v + extra[n]) * inv - off
            if below <= kink[n]:
                t = below if below > 0.0 else 0.0
            else:
                t = kink[n]
        out[n] = t
        s += t
    return s


def solve_cells(rate, extra, active, budget, double v, double gamma, double theta, kink,
                double rel_tol=1e-8, int max_iter=200):
    cdef const double[:, ::1] r = np.ascontiguousarray(rate, dtype=np.float64)
    cdef const double[:, ::1] e = np.ascontiguousarray(extra, dtype=np.float64)
    cdef const unsigned char[:, ::1] a = np.ascontiguousarray(active, dtype=np.uint8)
    cdef const double[::1] b = np.ascontiguousarray(budget, dtype=np.float64)
    cdef const double[:, ::1] k = np.ascontiguousarray(kink, dtype=np.float64)
    cdef Py_ssize_t ncell = r.shape[0], nclient = r.shape[1], c, n
    tau_arr = np.zeros((ncell, nclient))
    lam_arr = np.zeros(ncell)
    cdef double[:, ::1] tau = tau_arr
    cdef double[::1] lam = lam_arr
    cdef double hi, lo, mid, s, w0, m, tol
    cdef int it, halvings, worst = 0
    cdef bint any_active, ok

    for c in range(ncell):
        hi = 0.0
        any_active = False
        for n in range(nclient):
            if a[c, n]:
                any_active = True
                w0 = v + e[c, n] if k[c, n] > 0.0 else v
                m = w0 * r[c, n] / (gamma * theta)
                if m > hi:
                    hi = m
        if not any_active:
            continue
        lam[c] = hi
        if b[c] <= 0.0:
            continue
        tol = rel_tol * fmax(1.0, b[c])
        lo = hi if hi < 1.0 else 1.0
        s = _cell_total(lo, r[c], e[c], a[c], k[c], v, gamma, theta, tau[c])
        halvings = 0
        while s <= b[c]:
            halvings += 1
            if halvings > 2000:
                raise RuntimeError("could not bracket the budget multiplier")
            lo *= 0.5
            s = _cell_total(lo, r[c], e[c], a[c], k[c], v, gamma, theta, tau[c])
        mid = lo
        it = 0
        ok = fabs(s - b[c]) <= tol
        while not ok:
            if it >= max_iter:
                raise RuntimeError(f"dual bisection did not converge in {max_iter} iterations")
            it += 1
            mid = sqrt(lo * hi)
            s = _cell_total(mid, r[c], e[c], a[c], k[c], v, gamma, theta, tau[c])
            if s > b[c]:
                lo = mid
            else:
                hi = mid
            ok = fabs(s - b[c]) <= tol
        lam[c] = mid
        if it > worst:
            worst = it
    return tau_arr, lam_arr, worst


cdef double _violation(double[:, :, ::1] y, double cap, double band) noexcept nogil:
    cdef Py_ssize_t R = y.shape[0], O = y.shape[1], r, i, j
    cdef double worst = 0.0, s, d
    for r in range(R):
        for j in range(O):
            s = 0.0
            for i in range(O):
                if -y[r, j, i] > worst:
                    worst = -y[r, j, i]
                s += y[r, j, i]
            if s - cap > worst:
                worst = s - cap
    for j in range(O):
        for i in range(j + 1, O):
            d = 0.0
            for r in range(R):
                d += y[r, j, i] - y[r, i, j]
            if fabs(d) - band > worst:
                worst = fabs(d) - band
    return worst


def dykstra_project(x, double cap, double band, double tol=1e-9, long max_sweeps=100000):
    y_arr = np.array(x, dtype=np.float64, order="C", copy=True)
    cdef double[:, :, ::1] y = y_arr
    cdef Py_ssize_t R = y.shape[0], O = y.shape[1], r, i, j
    p1_arr = np.zeros_like(y_arr)
    p2_arr = np.zeros_like(y_arr)
    p3_arr = np.zeros_like(y_arr)
    cdef double[:, :, ::1] p1 = p1_arr
    cdef double[:, :, ::1] p2 = p2_arr
    cdef double[:, :, ::1] p3 = p3_arr
    prev_arr = np.empty_like(y_arr)
    cdef double[:, :, ::1] prev = prev_arr
    cdef double z, s, ex, d, sh, move
    cdef long sweep

    for sweep in range(1, max_sweeps + 1):
        prev[...] = y
        for r in range(R):
            for j in range(O):
                for i in range(O):
                    z = y[r, j, i] + p1[r, j, i]
                    y[r, j, i] = z if z > 0.0 else 0.0
                    p1[r, j, i] = z - y[r, j, i]
        for r in range(R):
            for j in range(O):
                s = 0.0
                for i in range(O):
                    s += y[r, j, i] + p2[r, j, i]
                ex = (s - cap) / O if s > cap else 0.0
                for i in range(O):
                    z = y[r, j, i] + p2[r, j, i]
                    y[r, j, i] = z - ex
                    p2[r, j, i] = ex
        for j in range(O):
            for i in range(j + 1, O):
                d = 0.0
                for r in range(R):
                    d += (y[r, j, i] + p3[r, j, i]) - (y[r, i, j] + p3[r, i, j])
                if d > band:
                    sh = (d - band) / (2.0 * R)
                elif d < -band:
                    sh = (d + band) / (2.0 * R)
                else:
                    sh = 0.0
                for r in range(R):
                    z = y[r, j, i] + p3[r, j, i]
                    y[r, j, i] = z - sh
                    p3[r, j, i] = sh
                    z = y[r, i, j] + p3[r, i, j]
                    y[r, i, j] = z + sh
                    p3[r, i, j] = -sh
        move = 0.0
        for r in range(R):
            for j in range(O):
                for i in range(O):
                    d = fabs(y[r, j, i] - prev[r, j, i])
                    if d > move:
                        move = d
        if move < tol and _violation(y, cap, band) <= 0.1 * tol:
            return y_arr, sweep
    return y_arr, -1
