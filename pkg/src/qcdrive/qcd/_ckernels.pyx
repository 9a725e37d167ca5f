# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled detector kernels; mirrors ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, fabs, INFINITY

cnp.import_array()


def cusum_run(e, double mu0, double s0, double mu1, double s1, double b, double w0=0.0):
    cdef cnp.float64_t[::1] ev = np.ascontiguousarray(e, dtype=np.float64)
    cdef Py_ssize_t n = ev.shape[0], i
    trace = np.empty(n)
    cdef cnp.float64_t[::1] tr = trace
    cdef double a0 = 1.0 / (2.0 * s0 * s0)
    cdef double a1 = 1.0 / (2.0 * s1 * s1)
    cdef double c = log(s0 / s1)
    cdef double w = w0, x
    for i in range(n):
        x = ev[i]
        w = w + (x - mu0) * (x - mu0) * a0 - (x - mu1) * (x - mu1) * a1 + c
        if w < 0.0:
            w = 0.0
        tr[i] = w
        if w >= b:
            return i, trace[: i + 1]
    return -1, trace


def mcusum_run(e, double mu0, double s0, mus, sigmas, double b, w0=None):
    cdef cnp.float64_t[::1] ev = np.ascontiguousarray(e, dtype=np.float64)
    cdef cnp.float64_t[::1] mv = np.ascontiguousarray(mus, dtype=np.float64)
    sig = np.ascontiguousarray(sigmas, dtype=np.float64)
    cdef Py_ssize_t n = ev.shape[0], m = mv.shape[0], i, j
    w_arr = np.zeros(m) if w0 is None else np.array(w0, dtype=np.float64)
    cdef cnp.float64_t[::1] w = w_arr
    a1_arr = 1.0 / (2.0 * sig * sig)
    c_arr = np.array([log(s0 / s) for s in sig])
    cdef cnp.float64_t[::1] a1 = a1_arr
    cdef cnp.float64_t[::1] c = c_arr
    trace = np.empty(n)
    cdef cnp.float64_t[::1] tr = trace
    cdef double a0 = 1.0 / (2.0 * s0 * s0)
    cdef double x, v, best
    for i in range(n):
        x = ev[i]
        best = -1.0
        for j in range(m):
            v = w[j] + (x - mu0) * (x - mu0) * a0 - (x - mv[j]) * (x - mv[j]) * a1[j] + c[j]
            if v < 0.0:
                v = 0.0
            w[j] = v
            if v > best:
                best = v
        tr[i] = best
        if best >= b:
            return i, trace[: i + 1], w_arr
    return -1, trace, w_arr


cdef double _glrt_value(cnp.float64_t[::1] ev, Py_ssize_t lo, Py_ssize_t hi,
                        double mu0, double s0, double nu_m, double delta_m):
    cdef double inv_var = 1.0 / (s0 * s0)
    cdef double logc = log(s0 / (s0 + delta_m))
    cdef double best = -INFINITY, sum_d = 0.0, sum_abs = 0.0, d, nu, s
    cdef Py_ssize_t i, cnt = 0
    i = hi
    while i >= lo:
        d = ev[i] - mu0
        sum_d += d
        sum_abs += fabs(d)
        cnt += 1
        nu = sum_abs / cnt - nu_m
        if nu < 0.0:
            nu = 0.0
        nu += nu_m
        s = nu * sum_d * inv_var - cnt * nu * nu * 0.5 * inv_var + cnt * logc
        if s > best:
            best = s
        i -= 1
    return best


def glrt_value(buf, double mu0, double s0, double nu_m, double delta_m):
    cdef cnp.float64_t[::1] ev = np.ascontiguousarray(buf, dtype=np.float64)
    return _glrt_value(ev, 0, ev.shape[0] - 1, mu0, s0, nu_m, delta_m)


def glrt_run(e, double mu0, double s0, double nu_m, double delta_m, Py_ssize_t cap, double b):
    cdef cnp.float64_t[::1] ev = np.ascontiguousarray(e, dtype=np.float64)
    cdef Py_ssize_t n = ev.shape[0], k, lo
    trace = np.empty(n)
    cdef cnp.float64_t[::1] tr = trace
    cdef double w
    for k in range(n):
        lo = 0 if cap <= 0 else max(0, k + 1 - cap)
        w = _glrt_value(ev, lo, k, mu0, s0, nu_m, delta_m)
        tr[k] = w
        if w >= b:
            return k, trace[: k + 1]
    return -1, trace


def cusum_batch(E, w, double mu0, double s0, double mu1, double s1, double b):
    cdef cnp.float64_t[:, ::1] ev = np.ascontiguousarray(E, dtype=np.float64)
    cdef cnp.float64_t[::1] wv = w
    cdef Py_ssize_t r = ev.shape[0], t = ev.shape[1], i, j
    stop_arr = np.full(r, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] stop = stop_arr
    cdef double a0 = 1.0 / (2.0 * s0 * s0)
    cdef double a1 = 1.0 / (2.0 * s1 * s1)
    cdef double c = log(s0 / s1)
    cdef double x, cur
    for i in range(r):
        cur = wv[i]
        for j in range(t):
            x = ev[i, j]
            cur = cur + (x - mu0) * (x - mu0) * a0 - (x - mu1) * (x - mu1) * a1 + c
            if cur < 0.0:
                cur = 0.0
            if cur >= b:
                stop[i] = j
                break
        wv[i] = cur
    return stop_arr
