"""Pure-Python/NumPy versions of the detector kernels.

Must stay behaviourally identical to ``_ckernels.pyx``; the test-suite runs
both against each other.
"""

import math

import numpy as np


def cusum_run(e, mu0, s0, mu1, s1, b, w0=0.0):
    e = np.ascontiguousarray(e, dtype=np.float64)
    a0 = 1.0 / (2.0 * s0 * s0)
    a1 = 1.0 / (2.0 * s1 * s1)
    c = math.log(s0 / s1)
    trace = np.empty(len(e))
    w = w0
    for i in range(len(e)):
        x = e[i]
        w = w + (x - mu0) * (x - mu0) * a0 - (x - mu1) * (x - mu1) * a1 + c
        if w < 0.0:
            w = 0.0
        trace[i] = w
        if w >= b:
            return i, trace[: i + 1]
    return -1, trace


def mcusum_run(e, mu0, s0, mus, sigmas, b, w0=None):
    e = np.ascontiguousarray(e, dtype=np.float64)
    mus = np.asarray(mus, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    m = len(mus)
    w = np.zeros(m) if w0 is None else np.array(w0, dtype=np.float64)
    a0 = 1.0 / (2.0 * s0 * s0)
    a1 = [1.0 / (2.0 * s * s) for s in sigmas]
    c = [math.log(s0 / s) for s in sigmas]
    trace = np.empty(len(e))
    for i in range(len(e)):
        x = e[i]
        best = -1.0
        for j in range(m):
            v = w[j] + (x - mu0) * (x - mu0) * a0 - (x - mus[j]) * (x - mus[j]) * a1[j] + c[j]
            if v < 0.0:
                v = 0.0
            w[j] = v
            if v > best:
                best = v
        trace[i] = best
        if best >= b:
            return i, trace[: i + 1], w
    return -1, trace, w


def glrt_value(buf, mu0, s0, nu_m, delta_m):
    """max over start k of the constrained cumulative log-likelihood ratio.

    ``buf`` holds e_k..e_n oldest first.
    """
    inv_var = 1.0 / (s0 * s0)
    logc = math.log(s0 / (s0 + delta_m))
    best = -math.inf
    sum_d = 0.0
    sum_abs = 0.0
    cnt = 0
    for i in range(len(buf) - 1, -1, -1):
        d = buf[i] - mu0
        sum_d += d
        sum_abs += abs(d)
        cnt += 1
        nu = sum_abs / cnt - nu_m
        if nu < 0.0:
            nu = 0.0
        nu += nu_m
        s = nu * sum_d * inv_var - cnt * nu * nu * 0.5 * inv_var + cnt * logc
        if s > best:
            best = s
    return best


def glrt_run(e, mu0, s0, nu_m, delta_m, cap, b):
    """GLRT over a stream; ``cap <= 0`` means unbounded look-back."""
    e = np.ascontiguousarray(e, dtype=np.float64)
    trace = np.empty(len(e))
    for n in range(len(e)):
        lo = 0 if cap <= 0 else max(0, n + 1 - cap)
        w = glrt_value(e[lo : n + 1], mu0, s0, nu_m, delta_m)
        trace[n] = w
        if w >= b:
            return n, trace[: n + 1]
    return -1, trace


def cusum_batch(E, w, mu0, s0, mu1, s1, b):
    """Advance independent CuSum statistics over rows of ``E``.

    ``w`` (one entry per row) is updated in place. Returns, per row, the
    column index of the first threshold crossing or -1.
    """
    E = np.asarray(E, dtype=np.float64)
    llr = (E - mu0) ** 2 / (2.0 * s0 * s0) - (E - mu1) ** 2 / (2.0 * s1 * s1) + math.log(s0 / s1)
    stop = np.full(E.shape[0], -1, dtype=np.int64)
    active = np.ones(E.shape[0], dtype=bool)
    for j in range(E.shape[1]):
        nw = np.maximum(w + llr[:, j], 0.0)
        w[:] = np.where(active, nw, w)
        hit = active & (w >= b)
        stop[hit] = j
        active &= ~hit
        if not active.any():
            break
    return stop
