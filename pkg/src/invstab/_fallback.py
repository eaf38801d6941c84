"""Pure-Python implementations of the hot kernels.

These mirror ``_kernels.pyx`` exactly and are used when the compiled
extension is unavailable or explicitly disabled.
"""

import numpy as np


def tv_prox(y, lam):
    """Proximal map of ``lam * sum |x[i+1] - x[i]|`` (Condat's direct algorithm)."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    width = y.shape[0]
    out = np.empty(width)
    if width == 0:
        return out
    if lam <= 0.0:
        out[:] = y
        return out
    yl = y.tolist()
    x = [0.0] * width
    k = k0 = kplus = kminus = 0
    umin = lam
    umax = -lam
    vmin = yl[0] - lam
    vmax = yl[0] + lam
    twolam = 2.0 * lam
    minlam = -lam
    last = width - 1
    while True:
        while k == last:
            if umin < 0.0:
                while True:
                    x[k0] = vmin
                    k0 += 1
                    if k0 > kminus:
                        break
                k = kminus = k0
                vmin = yl[k0]
                umin = lam
                umax = vmin + umin - vmax
            elif umax > 0.0:
                while True:
                    x[k0] = vmax
                    k0 += 1
                    if k0 > kplus:
                        break
                k = kplus = k0
                vmax = yl[k0]
                umax = minlam
                umin = vmax + umax - vmin
            else:
                vmin += umin / (k - k0 + 1)
                while True:
                    x[k0] = vmin
                    k0 += 1
                    if k0 > k:
                        break
                out[:] = x
                return out
        umin += yl[k + 1] - vmin
        if umin < minlam:
            while True:
                x[k0] = vmin
                k0 += 1
                if k0 > kminus:
                    break
            k = kplus = kminus = k0
            vmin = yl[k0]
            vmax = vmin + twolam
            umin = lam
            umax = minlam
            continue
        umax += yl[k + 1] - vmax
        if umax > lam:
            while True:
                x[k0] = vmax
                k0 += 1
                if k0 > kplus:
                    break
            k = kplus = kminus = k0
            vmax = yl[k0]
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


def soft_threshold(x, thr):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)


def _dt_sq_norm(y):
    # ||D^T y||^2 for the forward-difference D with y of length n - 1
    return float(y[0] ** 2 + y[-1] ** 2 + np.sum(np.diff(y) ** 2))


def admm_shrink_step(v, z, w, thr, mask, relax=1.0):
    """Fused z/w update of scaled ADMM for ``z = Du``; updates z, w, mask in place.

    ``relax`` is the over-relaxation weight: the shrink acts on
    ``relax * v + (1 - relax) * z_old + w``.

    Returns ``(r2, dz2, s2, v2, z2, dtw2)``: squared norms of the primal
    residual ``v - z_new``, of ``z_new - z_old``, of ``D^T (z_new - z_old)``,
    of ``v``, of ``z_new`` and of ``D^T w_new``.
    """
    xh = relax * v + (1.0 - relax) * z
    t = xh + w
    active = np.abs(t) > thr
    z_new = np.where(active, t - np.copysign(thr, t), 0.0)
    dz = z_new - z
    r = v - z_new
    w += xh - z_new
    z[:] = z_new
    mask[:] = active
    return (
        float(r @ r),
        float(dz @ dz),
        _dt_sq_norm(dz),
        float(v @ v),
        float(z_new @ z_new),
        _dt_sq_norm(w),
    )
