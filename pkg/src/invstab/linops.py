"""Dense linear operators, SVD caching and spectral reconstruction."""

import json
import threading
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from invstab.errors import (
    DegenerateOperatorError,
    FilterDomainError,
    ParameterError,
    SVDConvergenceError,
)

RANK_RTOL = 1e-12


class SVDFactors(NamedTuple):
    U: np.ndarray  # m x r, measurement-space basis
    singular_values: np.ndarray  # r, non-increasing
    V: np.ndarray  # n x r, data-space basis
    rank_tol: float

    @property
    def rank(self):
        return int(np.count_nonzero(self.singular_values > self.rank_tol))


class LinearOperator:
    """Immutable dense matrix with lazily computed, thread-safe caches.

    ``generation`` records how the entries were produced (distribution,
    parameters, seed, PRNG). Derived quantities (SVD, factorizations of
    solver systems) are memoized per key through :meth:`cached`.
    """

    def __init__(self, entries, generation=None):
        entries = np.array(entries, dtype=np.float64, copy=True)
        if entries.ndim != 2:
            raise ParameterError(f"operator entries must be 2-D, got shape {entries.shape}")
        entries.setflags(write=False)
        self.entries = entries
        self.generation = dict(generation or {})
        self._lock = threading.RLock()
        self._cache = {}

    @property
    def shape(self):
        return self.entries.shape

    @property
    def rows(self):
        return self.entries.shape[0]

    @property
    def cols(self):
        return self.entries.shape[1]

    @property
    def T(self):
        return self.entries.T

    def __matmul__(self, x):
        return self.entries @ x

    def __repr__(self):
        return f"LinearOperator(shape={self.shape}, generation={self.generation})"

    def __getstate__(self):
        return {"entries": self.entries, "generation": self.generation}

    def __setstate__(self, state):
        self.__init__(state["entries"], state["generation"])

    def cached(self, key, factory):
        """Return ``factory()`` memoized under ``key``; computed at most once."""
        try:
            return self._cache[key]
        except KeyError:
            pass
        with self._lock:
            if key not in self._cache:
                self._cache[key] = factory()
            return self._cache[key]

    def svd(self):
        return svd(self)


def identity_operator(n):
    return LinearOperator(np.eye(n), {"kind": "identity", "n": n})


def svd(A):
    """Economy SVD of ``A``, cached on the operator."""

    def compute():
        entries = A.entries
        if not np.all(np.isfinite(entries)):
            raise SVDConvergenceError("operator has non-finite entries", A.generation)
        try:
            U, s, Vt = np.linalg.svd(entries, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise SVDConvergenceError(f"SVD failed to converge: {exc}", A.generation) from exc
        tol = max(A.shape) * (s[0] if s.size else 0.0) * RANK_RTOL
        for arr in (U, s, Vt):
            arr.setflags(write=False)
        return SVDFactors(U, s, Vt.T, tol)

    return A.cached("svd", compute)


def condition_number(A):
    """sigma_max / sigma_min over the numerically nonzero singular values."""
    fac = svd(A)
    s = fac.singular_values[fac.singular_values > fac.rank_tol]
    if s.size == 0:
        raise DegenerateOperatorError("operator is numerically zero; condition number undefined")
    return float(s[0] / s[-1])


def pinv(A):
    """Moore-Penrose pseudo-inverse (n x m) using the cached SVD and rank tolerance."""

    def compute():
        fac = svd(A)
        keep = fac.singular_values > fac.rank_tol
        inv = np.zeros_like(fac.singular_values)
        inv[keep] = 1.0 / fac.singular_values[keep]
        P = (fac.V * inv) @ fac.U.T
        P.setflags(write=False)
        return P

    return A.cached("pinv", compute)


def finite_difference_matrix(n):
    """(n-1) x n forward differences, ``(Du)_i = u[i+1] - u[i]``."""
    if int(n) != n or n < 2:
        raise ParameterError(f"finite differences need n >= 2, got {n}")
    n = int(n)
    D = np.zeros((n - 1, n))
    idx = np.arange(n - 1)
    D[idx, idx] = -1.0
    D[idx, idx + 1] = 1.0
    return LinearOperator(D, {"kind": "forward-difference", "n": n})


def _check_rows(A, f):
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (A.rows,):
        raise ParameterError(f"measurement length {f.shape} does not match operator rows {A.rows}")
    return f


def data_consistency_project(A, f, u):
    """``A^+ f + (I - A^+ A) u``: keep the null-space part of u, replace the rest."""
    f = _check_rows(A, f)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (A.cols,):
        raise ParameterError(f"signal length {u.shape} does not match operator columns {A.cols}")
    P = pinv(A)
    return P @ f + u - P @ (A.entries @ u)


FILTER_KINDS = ("truncated-svd", "tikhonov-filter", "per-index", "custom-table")


@dataclass(frozen=True)
class SpectralFilter:
    """Bounded replacement ``g(sigma)`` for ``1/sigma`` in the pseudo-inverse.

    ``truncated-svd``: parameters ``(threshold,)``; g = 1/sigma above it, else 0.
    ``tikhonov-filter``: ``(alpha,)``; g = sigma / (sigma^2 + alpha).
    ``per-index``: one value g_i per singular index.
    ``custom-table``: flat ``(sigma_0, g_0, sigma_1, g_1, ...)`` with
    increasing sigma, linearly interpolated; undefined outside the table.
    """

    kind: str
    parameters: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ParameterError(f"unknown filter kind {self.kind!r}; expected one of {FILTER_KINDS}")
        params = tuple(float(p) for p in np.ravel(self.parameters))
        object.__setattr__(self, "parameters", params)
        if self.kind == "truncated-svd" and (len(params) != 1 or params[0] < 0):
            raise ParameterError("truncated-svd takes one nonnegative threshold")
        if self.kind == "tikhonov-filter" and (len(params) != 1 or not params[0] > 0):
            raise ParameterError("tikhonov-filter takes one positive alpha")
        if self.kind == "custom-table":
            if len(params) < 4 or len(params) % 2:
                raise ParameterError("custom-table needs at least two (sigma, g) pairs")
            if np.any(np.diff(params[0::2]) <= 0):
                raise ParameterError("custom-table sigmas must be strictly increasing")

    @classmethod
    def truncated(cls, threshold=0.0):
        return cls("truncated-svd", (threshold,))

    @classmethod
    def tikhonov(cls, alpha):
        return cls("tikhonov-filter", (alpha,))

    @classmethod
    def per_index(cls, values):
        return cls("per-index", tuple(np.ravel(values)))

    def evaluate(self, singular_values):
        s = np.asarray(singular_values, dtype=np.float64)
        if self.kind == "truncated-svd":
            g = np.zeros_like(s)
            keep = s > self.parameters[0]
            g[keep] = 1.0 / s[keep]
        elif self.kind == "tikhonov-filter":
            g = s / (s * s + self.parameters[0])
        elif self.kind == "per-index":
            if len(self.parameters) != s.size:
                raise FilterDomainError(
                    f"per-index filter has {len(self.parameters)} values for {s.size} singular values"
                )
            g = np.array(self.parameters)
        else:
            xs = np.array(self.parameters[0::2])
            ys = np.array(self.parameters[1::2])
            if s.size and (s.min() < xs[0] or s.max() > xs[-1]):
                raise FilterDomainError(
                    f"custom table covers [{xs[0]}, {xs[-1]}], got sigma in [{s.min()}, {s.max()}]"
                )
            g = np.interp(s, xs, ys)
        if not np.all(np.isfinite(g)):
            raise FilterDomainError(f"{self.kind} filter is not finite on the given spectrum")
        return g

    def to_json(self):
        return json.dumps({"kind": self.kind, "parameters": list(self.parameters)})

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls(data["kind"], tuple(data["parameters"]))


def spectral_reconstruct(A, f, spectral_filter):
    """``sum_i g(sigma_i) <f, U_i> V_i``.

    ``U_i`` are the measurement-space (left) singular vectors and ``V_i`` the
    data-space (right) ones, so ``A = U diag(sigma) V^T``.
    """
    f = _check_rows(A, f)
    fac = svd(A)
    g = spectral_filter.evaluate(fac.singular_values)
    return fac.V @ (g * (fac.U.T @ f))


def fit_spectral_filter(dataset, A):
    """Per-index filter minimizing the mean squared coefficient error.

    For each singular index the scalar problem
    ``min_g sum_k (g <f_k, U_i> - <u_k, V_i>)^2`` has the closed form
    ``g_i = sum_k c_ik t_ik / sum_k c_ik^2`` (0 when all ``c_ik`` vanish).
    ``dataset`` holds ``(signal, measurement)`` pairs; either objects with a
    ``values`` attribute or plain arrays.
    """
    if not dataset:
        raise ParameterError("cannot fit a spectral filter on an empty dataset")
    U_rows, F_rows = _stack_pairs(dataset, A)
    fac = svd(A)
    C = F_rows @ fac.U  # K x r coefficients of the data
    T = U_rows @ fac.V  # K x r coefficients of the signals
    num = np.sum(C * T, axis=0)
    den = np.sum(C * C, axis=0)
    g = np.zeros_like(num)
    ok = den > 0
    g[ok] = num[ok] / den[ok]
    return SpectralFilter.per_index(g)


def _values(obj):
    return np.asarray(getattr(obj, "values", obj), dtype=np.float64)


def _stack_pairs(dataset, A=None):
    U_rows = np.array([_values(s) for s, _ in dataset])
    F_rows = np.array([_values(f) for _, f in dataset])
    if U_rows.ndim != 2 or F_rows.ndim != 2:
        raise ParameterError("inconsistent vector lengths in dataset")
    if A is not None and (U_rows.shape[1] != A.cols or F_rows.shape[1] != A.rows):
        raise ParameterError(
            f"dataset dims (n={U_rows.shape[1]}, m={F_rows.shape[1]}) do not match operator {A.shape}"
        )
    return U_rows, F_rows
