# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: 1D TV proximal map and the fused ADMM shrink step."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def tv_prox(y, double lam):
    """Proximal map of ``lam * sum |x[i+1] - x[i]|`` (Condat's direct algorithm)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] yarr = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t width = yarr.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(width)
    if width == 0:
        return out
    if lam <= 0.0:
        out[:] = yarr
        return out
    _tv_prox(&yarr[0], &out[0], width, lam)
    return out


cdef void _tv_prox(const double* inp, double* x, Py_ssize_t width, double lam) nogil:
    cdef Py_ssize_t k = 0, k0 = 0, kplus = 0, kminus = 0
    cdef double umin = lam, umax = -lam
    cdef double vmin = inp[0] - lam, vmax = inp[0] + lam
    cdef double twolam = 2.0 * lam, minlam = -lam
    cdef Py_ssize_t last = width - 1
    while True:
        while k == last:
            if umin < 0.0:
                while True:
                    x[k0] = vmin
                    k0 += 1
                    if k0 > kminus:
                        break
                k = k0
                kminus = k0
                vmin = inp[k0]
                umin = lam
                umax = vmin + umin - vmax
            elif umax > 0.0:
                while True:
                    x[k0] = vmax
                    k0 += 1
                    if k0 > kplus:
                        break
                k = k0
                kplus = k0
                vmax = inp[k0]
                umax = minlam
                umin = vmax + umax - vmin
            else:
                vmin += umin / (k - k0 + 1)
                while True:
                    x[k0] = vmin
                    k0 += 1
                    if k0 > k:
                        break
                return
        umin += inp[k + 1] - vmin
        if umin < minlam:
            while True:
                x[k0] = vmin
                k0 += 1
                if k0 > kminus:
                    break
            k = k0
            kplus = k0
            kminus = k0
            vmin = inp[k0]
            vmax = vmin + twolam
            umin = lam
            umax = minlam
            continue
        umax += inp[k + 1] - vmax
        if umax > lam:
            while True:
                x[k0] = vmax
                k0 += 1
                if k0 > kplus:
                    break
            k = k0
            kplus = k0
            kminus = k0
            vmax = inp[k0]
            vmin = vmax - twolam
            umin = lam
            umax = minlam
            continue
        k += 1
        if umin >= lam:
            kminus = k
            vmin += (umin - lam) / (kminus - k0 + 1)
            umin = lam
        if umax <= minlam:
            kplus = k
            vmax += (umax + lam) / (kplus - k0 + 1)
            umax = minlam


def soft_threshold(x, double thr):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xa = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(xa)
    cdef Py_ssize_t i
    cdef double t
    for i in range(xa.shape[0]):
        t = xa[i]
        if t > thr:
            out[i] = t - thr
        elif t < -thr:
            out[i] = t + thr
        else:
            out[i] = 0.0
    return out.reshape(np.shape(x))


def admm_shrink_step(double[::1] v, double[::1] z, double[::1] w, double thr,
                     cnp.uint8_t[::1] mask, double relax=1.0):
    """Fused z/w update of scaled ADMM for ``z = Du``; updates z, w, mask in place.

    ``relax`` is the over-relaxation weight: the shrink acts on
    ``relax * v + (1 - relax) * z_old + w``.

    Returns ``(r2, dz2, s2, v2, z2, dtw2)``: squared norms of the primal
    residual ``v - z_new``, of ``z_new - z_old``, of ``D^T (z_new - z_old)``,
    of ``v``, of ``z_new`` and of ``D^T w_new``.
    """
    cdef Py_ssize_t p = v.shape[0], i
    cdef double t, xh, zn, r, dz, dz_prev = 0.0, w_prev = 0.0, d
    cdef double keep = 1.0 - relax
    cdef double r2 = 0.0, dz2 = 0.0, s2 = 0.0, v2 = 0.0, z2 = 0.0, dtw2 = 0.0
    with nogil:
        for i in range(p):
            xh = relax * v[i] + keep * z[i]
            t = xh + w[i]
            if t > thr:
                zn = t - thr
                mask[i] = 1
            elif t < -thr:
                zn = t + thr
                mask[i] = 1
            else:
                zn = 0.0
                mask[i] = 0
            r = v[i] - zn
            dz = zn - z[i]
            w[i] = w[i] + (xh - zn)
            z[i] = zn
            r2 += r * r
            dz2 += dz * dz
            v2 += v[i] * v[i]
            z2 += zn * zn
            d = dz_prev - dz
            s2 += d * d
            d = w_prev - w[i]
            dtw2 += d * d
            dz_prev = dz
            w_prev = w[i]
        s2 += dz_prev * dz_prev
        dtw2 += w_prev * w_prev
    return r2, dz2, s2, v2, z2, dtw2
