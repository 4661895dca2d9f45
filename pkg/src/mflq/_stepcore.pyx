# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled stepping kernel for the population simulator.

Mirrors ``_steploop.step_chunk`` with explicit per-agent loops.  The two
kernels agree to floating-point roundoff; each one is individually
deterministic, so results never depend on the worker-thread count.  The
empirical average is accumulated over each component's sorted values,
keeping the output invariant under relabeling agents of one type.
"""

from libc.stdint cimport int64_t
from libc.stdlib cimport qsort

import numpy as np

__all__ = ["step_chunk"]


cdef int _cmp_double(const void* pa, const void* pb) noexcept nogil:
    cdef double a = (<const double*> pa)[0]
    cdef double b = (<const double*> pb)[0]
    if a < b:
        return -1
    if a > b:
        return 1
    return 0


cdef void _advance(
    const int64_t[::1] typ,
    const double[:, :, :, ::1] drm,
    const double[:, :, ::1] drv,
    const double[:, :, :, ::1] sdm,
    const double[:, :, ::1] sdv,
    const double[:, :, :, ::1] ug,
    const double[:, :, ::1] uo,
    const double[:, :, :, ::1] ar,
    const double[:, :, ::1] sig,
    const double[:, :, ::1] breal,
    const double[:, :, ::1] dreal,
    const double[:, :, ::1] freal,
    const double[:, ::1] fxhat,
    const double[:, ::1] xi,
    double dt,
    const double[:, :, ::1] dw,
    const double[:, :, ::1] perturb,
    double[:, :, :, ::1] xt,
    double[:, :, :, ::1] xa,
    double[:, :, :, ::1] xr,
    double[:, :, :, ::1] u,
    double[::1] buf,
    double[::1] xbar,
    double[::1] fx,
) noexcept nogil:
    cdef Py_ssize_t cpaths = dw.shape[0]
    cdef Py_ssize_t steps = dw.shape[1]
    cdef Py_ssize_t nagents = typ.shape[0]
    cdef Py_ssize_t n = xa.shape[3]
    cdef Py_ssize_t n2 = xt.shape[3]
    cdef Py_ssize_t d = u.shape[3]
    cdef Py_ssize_t c, m, i, j, a, b
    cdef int64_t k
    cdef double acc, sdiff, bu, du, w

    for c in range(cpaths):
        for i in range(nagents):
            for a in range(n2):
                xt[c, 0, i, a] = 0.0
            for a in range(n):
                xa[c, 0, i, a] = xi[i, a]
                xr[c, 0, i, a] = xi[i, a]
        for m in range(steps):
            for j in range(n):
                for i in range(nagents):
                    buf[i] = xr[c, m, i, j]
                qsort(&buf[0], nagents, sizeof(double), _cmp_double)
                acc = 0.0
                for i in range(nagents):
                    acc += buf[i]
                xbar[j] = acc / nagents
            for j in range(n):
                acc = 0.0
                for b in range(n):
                    acc += freal[m, j, b] * xbar[b]
                fx[j] = acc
            for i in range(nagents):
                k = typ[i]
                w = dw[c, m, i]
                for a in range(d):
                    acc = uo[k, m, a] + perturb[m, i, a]
                    for b in range(n2):
                        acc += ug[k, m, a, b] * xt[c, m, i, b]
                    u[c, m, i, a] = acc
                for a in range(n2):
                    acc = drv[k, m, a]
                    sdiff = sdv[k, m, a]
                    for b in range(n2):
                        acc += drm[k, m, a, b] * xt[c, m, i, b]
                        sdiff += sdm[k, m, a, b] * xt[c, m, i, b]
                    xt[c, m + 1, i, a] = xt[c, m, i, a] + dt * acc + sdiff * w
                for a in range(n):
                    bu = 0.0
                    du = sig[k, m, a]
                    for b in range(d):
                        bu += breal[m, a, b] * u[c, m, i, b]
                        du += dreal[m, a, b] * u[c, m, i, b]
                    acc = bu + fxhat[m, a]
                    for b in range(n):
                        acc += ar[k, m, a, b] * xa[c, m, i, b]
                    xa[c, m + 1, i, a] = xa[c, m, i, a] + dt * acc + du * w
                    acc = bu + fx[a]
                    for b in range(n):
                        acc += ar[k, m, a, b] * xr[c, m, i, b]
                    xr[c, m + 1, i, a] = xr[c, m, i, a] + dt * acc + du * w


def step_chunk(typ, drm, drv, sdm, sdv, ug, uo, ar, sig,
               breal, dreal, freal, fxhat, xi, dt, dw, perturb,
               xt, xa, xr, u):
    """Advance one chunk of paths; results land in ``xt``..``u``.

    Same contract as the pure-numpy kernel: see ``_steploop.step_chunk``.
    """
    nagents = typ.shape[0]
    n = xa.shape[3]
    buf = np.empty(nagents)
    xbar = np.empty(n)
    fx = np.empty(n)
    _advance(
        typ, drm, drv, sdm, sdv, ug, uo, ar, sig,
        breal, dreal, freal, fxhat, xi, float(dt), dw, perturb,
        xt, xa, xr, u, buf, xbar, fx,
    )
