"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the
pure-Python implementations in :mod:`invstab._fallback` are used.
:func:`use_backend` switches explicitly (benchmarks, tests).
"""

from invstab import _fallback

try:
    from invstab import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _fallback}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_active = _compiled if _compiled is not None else _fallback


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return "compiled" if _active is _compiled and _compiled is not None else "python"


def use_backend(name):
    """Select ``"compiled"`` or ``"python"`` kernels; returns the previous name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available_backends()}")
    previous = backend_name()
    _active = _BACKENDS[name]
    return previous


def tv_prox(y, lam):
    return _active.tv_prox(y, float(lam))


def soft_threshold(x, thr):
    return _active.soft_threshold(x, float(thr))


def admm_shrink_step(v, z, w, thr, mask, relax=1.0):
    return _active.admm_shrink_step(v, z, w, float(thr), mask, float(relax))
