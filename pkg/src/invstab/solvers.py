"""Reconstruction operators G(f) with subgradient certificates.

All variational solvers use the data term ``E(u) = 1/2 ||Au - f||^2``:

* ``tikhonov``: ``R(u) = alpha/2 ||Du||^2``, closed form
  ``(A^T A + alpha D^T D)^{-1} A^T f``.
* ``tv-admm``: ``R(u) = alpha ||Du||_1`` with forward differences D,
  solved by scaled ADMM on the split ``z = Du``.

The certificate stored in ``Reconstruction.subgradient`` is the element of
``dR(u)`` selected by the optimality condition ``0 in A^T(Au - f) + dR(u)``.
"""

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from invstab import kernels
from invstab.errors import (
    ContractError,
    DegenerateRegularizationError,
    NotApplicableError,
    NumericalError,
    ParameterError,
)
from invstab.linops import (
    LinearOperator,
    SpectralFilter,
    _stack_pairs,
    finite_difference_matrix,
    pinv,
    spectral_reconstruct,
    svd,
)

SOLVER_IDS = ("tikhonov", "tv-admm", "pnp-pgd", "learned-linear", "spectral")
VARIATIONAL = frozenset({"tikhonov", "tv-admm"})
LINEAR = frozenset({"tikhonov", "learned-linear", "spectral"})

TIKHONOV_RESIDUAL_RTOL = 1e-8
JUMP_RTOL = 1e-6
_RHO_LIMITS = (1e-8, 1e8)


@dataclass
class SolverParams:
    alpha: float = 1.0
    admm_penalty: float = 1.0
    admm_relaxation: float = 1.8
    max_iterations: int = 5000
    primal_tolerance: float = 1e-6
    dual_tolerance: float = 1e-6
    absolute_tolerance: float = 1e-9
    residual_balancing: bool = True
    balance_ratio: float = 10.0
    balance_factor: float = 2.0
    step_size: Optional[float] = None  # PnP tau; None means 1 / sigma_max(A)^2
    pnp_iterations: int = 1000
    denoiser: str = "tv"
    denoiser_width: int = 5
    pnp_init_alpha: float = 1e-7
    spectral_filter: Optional[SpectralFilter] = None

    def validate(self):
        positives = {
            "alpha": self.alpha,
            "admm_penalty": self.admm_penalty,
            "primal_tolerance": self.primal_tolerance,
            "dual_tolerance": self.dual_tolerance,
            "absolute_tolerance": self.absolute_tolerance,
            "pnp_init_alpha": self.pnp_init_alpha,
        }
        for name, value in positives.items():
            if not (isinstance(value, (int, float)) and value > 0 and math.isfinite(value)):
                raise ParameterError(f"{name} must be a positive real, got {value!r}")
        for name in ("primal_tolerance", "dual_tolerance", "absolute_tolerance"):
            if getattr(self, name) >= 1:
                raise ParameterError(f"{name} must be < 1, got {getattr(self, name)}")
        for name in ("max_iterations", "pnp_iterations"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ParameterError(f"{name} must be a positive integer, got {value!r}")
        if self.step_size is not None and not self.step_size > 0:
            raise ParameterError(f"step_size must be positive, got {self.step_size}")
        if not 0 < self.admm_relaxation < 2:
            raise ParameterError(f"admm_relaxation must lie in (0, 2), got {self.admm_relaxation}")
        if self.balance_ratio <= 1 or self.balance_factor <= 1:
            raise ParameterError("balance_ratio and balance_factor must exceed 1")
        if self.denoiser not in DENOISERS:
            raise ParameterError(f"unknown denoiser {self.denoiser!r}; expected one of {sorted(DENOISERS)}")
        return self


@dataclass
class Diagnostics:
    iterations: int = 0
    converged: bool = True
    optimality_residual: float = 0.0
    optimality_tolerance: float = 0.0
    objective: float = float("nan")
    primal_residuals: list = field(default_factory=list)
    dual_residuals: list = field(default_factory=list)
    merit: list = field(default_factory=list)
    penalties: list = field(default_factory=list)
    certificate: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self, histories=True):
        out = {
            "iterations": self.iterations,
            "converged": self.converged,
            "optimality_residual": self.optimality_residual,
            "optimality_tolerance": self.optimality_tolerance,
            "objective": self.objective,
            "certificate": dict(self.certificate),
            "extra": dict(self.extra),
        }
        if histories:
            out["primal_residuals"] = list(self.primal_residuals)
            out["dual_residuals"] = list(self.dual_residuals)
            out["merit"] = list(self.merit)
            out["penalties"] = list(self.penalties)
        return out


@dataclass
class Reconstruction:
    values: np.ndarray
    solver_id: str
    regularization_strength: float
    subgradient: Optional[np.ndarray] = None
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    trace: object = field(default=None, repr=False, compare=False)

    @property
    def has_certificate(self):
        return self.subgradient is not None

    def sidecar(self):
        return {
            "solver_id": self.solver_id,
            "alpha": self.regularization_strength,
            "has_subgradient": self.has_certificate,
            "diagnostics": self.diagnostics.to_dict(),
        }


# ---------------------------------------------------------------- helpers


def operator_digest(op):
    return op.cached("digest", lambda: hashlib.sha1(op.entries.tobytes()).hexdigest())


def _as_operator(D, n):
    if D is None:
        return finite_difference_matrix(n)
    if isinstance(D, LinearOperator):
        return D
    return LinearOperator(D)


def _check_f(A, f):
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (A.rows,):
        raise ParameterError(f"measurement length {f.shape} does not match operator rows {A.rows}")
    if not np.all(np.isfinite(f)):
        raise NumericalError("measurement contains non-finite values")
    return f


def _diff(x):
    return x[1:] - x[:-1]


def _diff_t(y):
    """D^T y for forward differences."""
    out = np.empty(y.shape[0] + 1)
    out[0] = -y[0]
    out[1:-1] = y[:-1] - y[1:]
    out[-1] = y[-1]
    return out


def data_residual_sq(A, u, f):
    r = A.entries @ u - f
    return float(r @ r)


def tv_objective(A, f, u, alpha):
    return 0.5 * data_residual_sq(A, u, f) + alpha * float(np.sum(np.abs(_diff(u))))


def spectral_norm_sq(A):
    return float(svd(A).singular_values[0] ** 2)


# ---------------------------------------------------------------- Tikhonov


def _shared_null_dim(A, D):
    stacked = np.vstack([A.entries, D.entries])
    s = np.linalg.svd(stacked, compute_uv=False)
    tol = max(stacked.shape) * (s[0] if s.size else 0.0) * 1e-12
    return int(stacked.shape[1] - np.count_nonzero(s > tol))


def _is_identity(D):
    return D.rows == D.cols and D.cached(("is-identity",), lambda: bool(np.array_equal(D.entries, np.eye(D.cols))))


def _degenerate(A, D):
    dim = _shared_null_dim(A, D)
    return DegenerateRegularizationError(
        f"A^T A + alpha D^T D is singular: null(A) and null(D) share a {dim}-dimensional subspace",
        dim,
    )


def _tikhonov_factor(A, D, alpha):
    """Cholesky factor of the system actually solved.

    With D = I and m < n the push-through form ``A^T (A A^T + alpha I)^{-1}``
    is used: its condition number is bounded by the data, not by ``1/alpha``.
    Returns ``(M, factor, dual)`` with ``M`` the primal normal matrix.
    """
    key = ("tikhonov", operator_digest(D), float(alpha))

    def compute():
        M = A.entries.T @ A.entries + alpha * (D.entries.T @ D.entries)
        dual = _is_identity(D) and A.rows < A.cols
        system = A.entries @ A.entries.T + alpha * np.eye(A.rows) if dual else M
        try:
            factor = sla.cho_factor(system, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise _degenerate(A, D) from None
        pivots = np.abs(np.diag(factor[0])) ** 2
        if pivots.min() <= system.shape[0] * np.finfo(float).eps * np.abs(np.diag(system)).max():
            if _shared_null_dim(A, D) > 0:
                raise _degenerate(A, D)
        return M, factor, dual

    return A.cached(key, compute)


def _tikhonov_apply(A, factor, dual, rhs_data):
    """Apply ``(A^T A + alpha D^T D)^{-1} A^T`` to columns of ``rhs_data``."""
    if dual:
        return A.entries.T @ sla.cho_solve(factor, rhs_data, check_finite=False)
    return sla.cho_solve(factor, A.entries.T @ rhs_data, check_finite=False)


def tikhonov_matrix(A, D=None, alpha=1.0):
    """The linear reconstruction map ``(A^T A + alpha D^T D)^{-1} A^T`` (n x m)."""
    D = _as_operator(D, A.cols)
    _, factor, dual = _tikhonov_factor(A, D, alpha)
    key = ("tikhonov-matrix", operator_digest(D), float(alpha))

    def compute():
        K = _tikhonov_apply(A, factor, dual, np.eye(A.rows))
        K.setflags(write=False)
        return K

    return A.cached(key, compute)


def tikhonov(A, D, f, alpha):
    """Generalized Tikhonov reconstruction with certificate ``p = alpha D^T D u``."""
    if not alpha > 0:
        raise ParameterError(f"Tikhonov alpha must be positive, got {alpha}")
    D = _as_operator(D, A.cols)
    if D.cols != A.cols:
        raise ParameterError(f"D has {D.cols} columns, A has {A.cols}")
    f = _check_f(A, f)
    M, factor, dual = _tikhonov_factor(A, D, alpha)
    rhs = A.entries.T @ f
    if dual:
        y = sla.cho_solve(factor, f, check_finite=False)
        y = y + sla.cho_solve(factor, f - A.entries @ (A.entries.T @ y) - alpha * y, check_finite=False)
        u = A.entries.T @ y
    else:
        u = sla.cho_solve(factor, rhs, check_finite=False)
        u = u + sla.cho_solve(factor, rhs - M @ u, check_finite=False)
    if not np.all(np.isfinite(u)):
        raise NumericalError("Tikhonov solve produced non-finite values")
    normal_res = float(np.linalg.norm(M @ u - rhs))
    rhs_norm = float(np.linalg.norm(rhs))
    tol = TIKHONOV_RESIDUAL_RTOL * rhs_norm if rhs_norm > 0 else 1e-12
    if normal_res > tol:
        dim = _shared_null_dim(A, D)
        if dim > 0:
            raise DegenerateRegularizationError(
                f"A^T A + alpha D^T D is singular: null(A) and null(D) share a {dim}-dimensional subspace",
                dim,
            )
    p = alpha * (D.entries.T @ (D.entries @ u))
    opt = float(np.linalg.norm(A.entries.T @ (A.entries @ u - f) + p))
    Du = D.entries @ u
    diag = Diagnostics(
        iterations=1,
        converged=normal_res <= tol,
        optimality_residual=opt,
        optimality_tolerance=tol,
        objective=0.5 * data_residual_sq(A, u, f) + 0.5 * alpha * float(Du @ Du),
        extra={"normal_equation_residual": normal_res},
    )
    return Reconstruction(u, "tikhonov", float(alpha), p, diag)


# ---------------------------------------------------------------- TV via ADMM


@dataclass
class ADMMTrace:
    """What the unrolled adjoint needs: per-iteration penalty, dual rescale and shrink mask."""

    alpha: float
    rhos: np.ndarray
    scales: np.ndarray
    masks: np.ndarray  # iterations x (n-1), uint8
    relax: float = 1.0

    @property
    def iterations(self):
        return int(self.rhos.shape[0])


def _admm_operators(A, rho):
    """(Q, P) = ((A^T A + rho D^T D)^{-1}, D Q D^T) for forward differences D."""
    key = ("admm", float(rho))

    def compute():
        n = A.cols
        D = finite_difference_matrix(n).entries
        M = A.entries.T @ A.entries + rho * (D.T @ D)
        factor = sla.cho_factor(M, lower=True, check_finite=False)
        Q = sla.cho_solve(factor, np.eye(n), check_finite=False)
        Q = 0.5 * (Q + Q.T)
        P = D @ Q @ D.T
        P = 0.5 * (P + P.T)
        Q.setflags(write=False)
        P.setflags(write=False)
        return Q, P

    return A.cached(key, compute)


def _admm_run(A, f, alpha, params, schedule=None):
    """Core ADMM loop. With ``schedule`` the penalty/rescale sequence is replayed
    for exactly that many iterations (the frozen map used by attacks)."""
    n = A.cols
    p = n - 1
    f = _check_f(A, f)
    Atf = A.entries.T @ f
    u0 = pinv(A) @ f
    z = _diff(u0)
    w = np.zeros(p)
    abs_tol = params.absolute_tolerance
    frozen = schedule is not None
    maxit = schedule.iterations if frozen else int(params.max_iterations)
    rho = float(schedule.rhos[0]) if frozen else float(params.admm_penalty)

    relax = float(schedule.relax) if frozen else float(params.admm_relaxation)
    rhos = np.empty(maxit)
    scales = np.ones(maxit)
    masks = np.empty((maxit, p), dtype=np.uint8)
    primal, dual, merit = [], [], []
    converged = False
    current = None
    k = -1
    for k in range(maxit):
        if frozen:
            rho = float(schedule.rhos[k])
        if current != rho:
            Q, P = _admm_operators(A, rho)
            c = Q @ Atf
            Dc = _diff(c)
            current = rho
        y = z - w
        v = Dc + rho * (P @ y)
        thr = alpha / rho
        gap = v - z
        step2 = float(gap @ gap)
        r2, dz2, s2, v2, z2, dtw2 = kernels.admm_shrink_step(v, z, w, thr, masks[k], relax)
        rhos[k] = rho
        r = math.sqrt(r2)
        s = rho * math.sqrt(s2)
        primal.append(r)
        dual.append(s)
        # fixed-point residual of the relaxed Douglas-Rachford map on z + w
        merit.append(rho * relax * relax * step2)
        if not (math.isfinite(r) and math.isfinite(s)):
            raise NumericalError(f"ADMM iterate became non-finite at iteration {k}")
        eps_pri = math.sqrt(p) * abs_tol + params.primal_tolerance * max(math.sqrt(v2), math.sqrt(z2))
        eps_dual = math.sqrt(n) * abs_tol + params.dual_tolerance * rho * math.sqrt(dtw2)
        y_last, rho_last, Q_last, c_last = y, rho, Q, c
        if frozen:
            scale = float(schedule.scales[k])
            if scale != 1.0:
                w *= scale
                scales[k] = scale
            continue
        if r <= eps_pri and s <= eps_dual:
            converged = True
            break
        if params.residual_balancing:
            # balance residuals relative to their stopping thresholds
            factor = params.balance_factor
            rn, sn = r / eps_pri, s / eps_dual
            if rn > params.balance_ratio * sn and rho * factor <= _RHO_LIMITS[1]:
                rho *= factor
                w /= factor
                scales[k] = 1.0 / factor
            elif sn > params.balance_ratio * rn and rho / factor >= _RHO_LIMITS[0]:
                rho /= factor
                w *= factor
                scales[k] = factor
    iters = k + 1
    u = c_last + rho_last * (Q_last @ _diff_t(y_last))
    if not np.all(np.isfinite(u)):
        raise NumericalError("ADMM produced a non-finite reconstruction")
    trace = ADMMTrace(float(alpha), rhos[:iters].copy(), scales[:iters].copy(), masks[:iters].copy(), relax)
    state = {
        "w": w,
        "z": z,
        "rho": rho_last,
        "eps_dual": eps_dual,
        "eps_pri": eps_pri,
        "converged": converged,
        "primal": primal,
        "dual": dual,
        "merit": merit,
    }
    return u, trace, state


def _tv_certificate(A, f, u, alpha, w, rho, tol):
    """Check ``p = A^T(f - Au)`` against ``alpha D^T s`` with a bounded multiplier s."""
    p = A.entries.T @ (f - A.entries @ u)
    Du = _diff(u)
    peak = float(np.max(np.abs(Du))) if Du.size else 0.0
    jumps = np.abs(Du) > JUMP_RTOL * peak if peak > 0 else np.zeros(Du.shape, bool)
    if alpha > 0:
        s = np.clip(rho * w / alpha, -1.0, 1.0)
    else:
        s = np.zeros_like(Du)
    s[jumps] = np.sign(Du[jumps])
    residual = float(np.linalg.norm(p - alpha * _diff_t(s)))
    info = {
        "residual": residual,
        "tolerance": tol,
        "valid": bool(residual <= tol),
        "jump_count": int(np.count_nonzero(jumps)),
        "multiplier_max_abs": float(np.max(np.abs(s))) if s.size else 0.0,
    }
    return p, info


def tv_admm(A, f, alpha, params=None):
    """Approximate minimizer of ``1/2||Au - f||^2 + alpha ||Du||_1``.

    Initialized at ``A^+ f`` (so ``alpha = 0`` returns the minimum-norm
    least-squares solution). Non-convergence is reported in the diagnostics,
    not raised.
    """
    params = (params or SolverParams()).validate()
    if not (alpha >= 0 and math.isfinite(alpha)):
        raise ParameterError(f"TV alpha must be nonnegative, got {alpha}")
    f = _check_f(A, f)
    u, trace, st = _admm_run(A, f, float(alpha), params)
    cert_tol = 10.0 * st["eps_dual"]
    p, cert = _tv_certificate(A, f, u, alpha, st["w"], st["rho"], cert_tol)
    diag = Diagnostics(
        iterations=trace.iterations,
        converged=st["converged"],
        optimality_residual=float(np.linalg.norm(A.entries.T @ (A.entries @ u - f) + p)),
        optimality_tolerance=cert_tol,
        objective=tv_objective(A, f, u, alpha),
        primal_residuals=st["primal"],
        dual_residuals=st["dual"],
        merit=st["merit"],
        penalties=trace.rhos.tolist(),
        certificate=cert,
        extra={"final_penalty": st["rho"], "eps_primal": st["eps_pri"], "eps_dual": st["eps_dual"]},
    )
    return Reconstruction(u, "tv-admm", float(alpha), p, diag, trace)


def tv_admm_frozen(A, f, trace):
    """Replay ADMM on ``f`` with the iteration count and penalty schedule of ``trace``.

    Returns ``(u, masks)``; the result is a continuous piecewise-linear map of f.
    """
    u, new_trace, _ = _admm_run(A, f, trace.alpha, SolverParams(), schedule=trace)
    return u, new_trace


def tv_admm_vjp(A, trace, cotangent):
    """Gradient w.r.t. f of ``<cotangent, u(f)>`` for the frozen ADMM map.

    Reverse accumulation over the recorded iterations; the shrink masks in
    ``trace`` fix the active set of every iteration.
    """
    g = np.asarray(cotangent, dtype=np.float64)
    K = trace.iterations
    lam = float(trace.relax)
    acc = {}
    rho = float(trace.rhos[K - 1])
    Q, _ = _admm_operators(A, rho)
    acc[rho] = g.copy()
    ybar = rho * _diff(Q @ g)
    zbar = ybar
    wbar = -ybar
    for k in range(K - 2, -1, -1):
        m = trace.masks[k].astype(bool)
        scale = float(trace.scales[k])
        tbar = np.where(m, zbar, scale * wbar)
        rho = float(trace.rhos[k])
        _, P = _admm_operators(A, rho)
        ubar = _diff_t(lam * tbar)
        if rho in acc:
            acc[rho] += ubar
        else:
            acc[rho] = ubar
        q = rho * (P @ (lam * tbar))
        zbar = q + (1.0 - lam) * tbar
        wbar = tbar - q
    grad = pinv(A).T @ _diff_t(zbar)
    for rho, a in acc.items():
        Q, _ = _admm_operators(A, rho)
        grad += A.entries @ (Q @ a)
    return grad


# ---------------------------------------------------------------- plug-and-play


class Denoiser:
    """A map R^n -> R^n used in place of a proximal step.

    ``vjp(x_in, x_out, cotangent)`` returns the cotangent w.r.t. the input;
    subclasses that cannot differentiate leave it unimplemented.
    """

    name = "denoiser"
    linear = False

    def __call__(self, x):
        raise NotImplementedError

    def vjp(self, x_in, x_out, cotangent):
        raise NotImplementedError(f"{self.name} has no derivative")


class IdentityDenoiser(Denoiser):
    name = "identity"
    linear = True

    def __call__(self, x):
        return np.array(x, dtype=np.float64, copy=True)

    def vjp(self, x_in, x_out, cotangent):
        return np.array(cotangent, dtype=np.float64, copy=True)


class TVProxDenoiser(Denoiser):
    """Exact prox of ``strength * TV``; Jacobian is averaging over constant runs."""

    name = "tv"

    def __init__(self, strength):
        if not strength >= 0:
            raise ParameterError(f"TV prox strength must be nonnegative, got {strength}")
        self.strength = float(strength)

    def __call__(self, x):
        return kernels.tv_prox(x, self.strength)

    def vjp(self, x_in, x_out, cotangent):
        cot = np.asarray(cotangent, dtype=np.float64)
        breaks = np.flatnonzero(x_out[1:] != x_out[:-1]) + 1
        starts = np.concatenate(([0], breaks))
        sums = np.add.reduceat(cot, starts)
        lengths = np.diff(np.concatenate((starts, [cot.size])))
        return np.repeat(sums / lengths, lengths)


class MovingAverageDenoiser(Denoiser):
    """Centered moving average of odd ``width``, window truncated at the ends."""

    name = "moving-average"
    linear = True

    def __init__(self, width=5):
        if int(width) != width or width < 1 or width % 2 == 0:
            raise ParameterError(f"moving-average width must be a positive odd integer, got {width}")
        self.width = int(width)
        self._matrix = {}

    def matrix(self, n):
        if n not in self._matrix:
            h = self.width // 2
            W = np.zeros((n, n))
            for i in range(n):
                lo, hi = max(0, i - h), min(n, i + h + 1)
                W[i, lo:hi] = 1.0 / (hi - lo)
            self._matrix[n] = W
        return self._matrix[n]

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.matrix(x.size) @ x

    def vjp(self, x_in, x_out, cotangent):
        cot = np.asarray(cotangent, dtype=np.float64)
        return self.matrix(cot.size).T @ cot


DENOISERS = {"identity", "tv", "moving-average"}


def make_denoiser(name, alpha=0.0, tau=1.0, width=5):
    if name == "identity":
        return IdentityDenoiser()
    if name == "tv":
        return TVProxDenoiser(alpha * tau)
    if name == "moving-average":
        return MovingAverageDenoiser(width)
    raise ParameterError(f"unknown denoiser {name!r}; expected one of {sorted(DENOISERS)}")


@dataclass
class PnPTrace:
    tau: float
    inputs: list
    outputs: list


def default_step_size(A):
    return 1.0 / spectral_norm_sq(A)


def pnp_pgd(A, f, denoiser, tau, iterations, u0, keep_trace=False):
    """``u^{k+1} = denoiser(u^k - tau A^T (A u^k - f))`` for ``iterations`` steps."""
    f = _check_f(A, f)
    limit = 2.0 / spectral_norm_sq(A)
    if not (tau > 0 and tau < limit):
        raise ParameterError(f"step size {tau} outside (0, 2/sigma_max^2 = {limit})")
    if int(iterations) != iterations or iterations < 0:
        raise ParameterError(f"iteration count must be a nonnegative integer, got {iterations}")
    u = np.array(u0, dtype=np.float64, copy=True)
    if u.shape != (A.cols,):
        raise ParameterError(f"initial point length {u.shape} does not match operator columns {A.cols}")
    Am = A.entries
    inputs, outputs, fixed = [], [], []
    prev = u
    for _ in range(int(iterations)):
        y = u - tau * (Am.T @ (Am @ u - f))
        out = np.asarray(denoiser(y), dtype=np.float64)
        if out.shape != u.shape:
            raise ContractError(f"denoiser returned shape {out.shape}, expected {u.shape}")
        if not np.all(np.isfinite(out)):
            raise NumericalError("PnP iterate became non-finite")
        if keep_trace:
            inputs.append(y)
            outputs.append(out)
        prev, u = u, out
        fixed.append(float(np.linalg.norm(u - prev)))
    diag = Diagnostics(
        iterations=int(iterations),
        converged=True,
        optimality_residual=fixed[-1] if fixed else 0.0,
        optimality_tolerance=float("inf"),
        primal_residuals=fixed,
        extra={"fixed_point_residual": fixed[-1] if fixed else 0.0, "step_size": float(tau),
               "denoiser": denoiser.name},
    )
    strength = getattr(denoiser, "strength", 0.0) / tau if tau else 0.0
    if isinstance(denoiser, TVProxDenoiser):
        diag.objective = tv_objective(A, f, u, strength)
    trace = PnPTrace(float(tau), inputs, outputs) if keep_trace else None
    return Reconstruction(u, "pnp-pgd", float(strength), None, diag, trace)


def pnp_vjp(A, denoiser, trace, cotangent):
    """Gradient w.r.t. f of ``<cotangent, u^I>`` holding ``u^0`` fixed.

    Also returns the cotangent w.r.t. ``u^0`` so callers can chain through
    an f-dependent initialization.
    """
    Am = A.entries
    tau = trace.tau
    ubar = np.asarray(cotangent, dtype=np.float64)
    fbar = np.zeros(A.rows)
    for y, out in zip(reversed(trace.inputs), reversed(trace.outputs)):
        ybar = denoiser.vjp(y, out, ubar)
        fbar += tau * (Am @ ybar)
        ubar = ybar - tau * (Am.T @ (Am @ ybar))
    return fbar, ubar


# ---------------------------------------------------------------- learned linear


@dataclass(frozen=True)
class LearnedLinear:
    matrix: np.ndarray  # n x m
    ridge: float
    train_size: int

    def __call__(self, f):
        return self.matrix @ np.asarray(f, dtype=np.float64)


def learned_linear_fit(train, ridge=0.0):
    """Least-squares linear reconstructor ``L`` minimizing
    ``sum_k ||L f_k - u_k||^2 + ridge ||L||_F^2``.

    Uses the m x m normal matrix when there are at least m samples and the
    K x K Gram matrix otherwise (identical for ridge > 0; the Gram form gives
    the minimum-norm interpolant at ridge = 0).
    """
    if not train:
        raise ParameterError("learned-linear fit needs at least one training pair")
    if not ridge >= 0:
        raise ParameterError(f"ridge must be nonnegative, got {ridge}")
    U, F = _stack_pairs(train)
    K, m = F.shape
    try:
        if K >= m:
            G = F.T @ F + ridge * np.eye(m)
            L = sla.solve(G, F.T @ U, assume_a="pos").T
        else:
            G = F @ F.T + ridge * np.eye(K)
            L = U.T @ sla.solve(G, F, assume_a="pos")
    except (np.linalg.LinAlgError, sla.LinAlgError):
        raise ParameterError(
            "normal matrix is singular; use a positive ridge or more linearly independent samples"
        ) from None
    if not np.all(np.isfinite(L)):
        raise ParameterError("learned-linear fit is ill-conditioned; use a positive ridge")
    cond = np.linalg.cond(G)
    if ridge == 0 and cond > 1e15:
        raise ParameterError(f"normal matrix is singular (cond {cond:.2e}); use a positive ridge")
    L.setflags(write=False)
    return LearnedLinear(L, float(ridge), int(K))


# ---------------------------------------------------------------- dispatch


class Reconstructor:
    """A configured reconstruction operator ``G: f -> Reconstruction``.

    Besides evaluation it exposes what the attack engine needs:
    ``matrix()`` for linear solvers and ``freeze()`` for iterative ones.
    """

    def __init__(self, solver_id, A, params=None, *, D=None, learned=None, denoiser=None,
                 u0=None, label=None):
        if solver_id not in SOLVER_IDS:
            raise ParameterError(f"unknown solver {solver_id!r}; expected one of {SOLVER_IDS}")
        self.solver_id = solver_id
        self.A = A
        self.params = (params or SolverParams()).validate()
        self.D = _as_operator(D, A.cols) if solver_id == "tikhonov" else D
        self.learned = learned
        self.u0 = u0
        self.label = label or f"{solver_id}(alpha={self.params.alpha:g})"
        if solver_id == "learned-linear" and learned is None:
            raise ParameterError("learned-linear solver needs a fitted LearnedLinear map")
        if solver_id == "pnp-pgd":
            self.tau = self.params.step_size or default_step_size(A)
            self.denoiser = denoiser or make_denoiser(
                self.params.denoiser, self.params.alpha, self.tau, self.params.denoiser_width
            )
        else:
            self.tau = None
            self.denoiser = denoiser

    @property
    def variational(self):
        return self.solver_id in VARIATIONAL

    @property
    def linear(self):
        return self.solver_id in LINEAR

    def regularizer_id(self):
        return self.solver_id if self.variational else None

    def __call__(self, f, keep_trace=False):
        A, params = self.A, self.params
        if self.solver_id == "tikhonov":
            return tikhonov(A, self.D, f, params.alpha)
        if self.solver_id == "tv-admm":
            return tv_admm(A, f, params.alpha, params)
        if self.solver_id == "pnp-pgd":
            u0 = self.u0 if self.u0 is not None else self._pnp_init(f)
            return pnp_pgd(A, f, self.denoiser, self.tau, params.pnp_iterations, u0, keep_trace)
        if self.solver_id == "learned-linear":
            f = _check_f(A, f)
            if self.learned.matrix.shape != (A.cols, A.rows):
                raise ParameterError(f"learned map shape {self.learned.matrix.shape} does not fit operator {A.shape}")
            values = self.learned(f)
            return Reconstruction(values, "learned-linear", float(self.learned.ridge), None,
                                  Diagnostics(iterations=1, extra={"train_size": self.learned.train_size}))
        f = _check_f(A, f)
        flt = params.spectral_filter or SpectralFilter.tikhonov(params.alpha)
        values = spectral_reconstruct(A, f, flt)
        return Reconstruction(values, "spectral", float(params.alpha), None,
                              Diagnostics(iterations=1, extra={"filter": flt.kind}))

    def _pnp_init(self, f):
        return tikhonov_matrix(self.A, None, self.params.pnp_init_alpha) @ f

    def matrix(self):
        """n x m matrix of a linear solver, or None."""
        A = self.A
        if self.solver_id == "tikhonov":
            return tikhonov_matrix(A, self.D, self.params.alpha)
        if self.solver_id == "learned-linear":
            return self.learned.matrix
        if self.solver_id == "spectral":
            flt = self.params.spectral_filter or SpectralFilter.tikhonov(self.params.alpha)
            key = ("spectral-matrix", flt.to_json())

            def compute():
                fac = svd(A)
                return (fac.V * flt.evaluate(fac.singular_values)) @ fac.U.T

            return A.cached(key, compute)
        return None

    def freeze(self, reference=None, f=None):
        """A fixed, almost-everywhere differentiable version of this map.

        Linear solvers are already fixed. ``tv-admm`` is frozen at the
        iteration count and penalty schedule of ``reference`` (solved at
        ``f`` when not given). PnP runs a fixed iteration count anyway.
        """
        return FrozenMap(self, reference, f)


class FrozenMap:
    def __init__(self, G, reference=None, f=None):
        self.G = G
        self.schedule = None
        if G.solver_id == "tv-admm":
            if reference is None:
                if f is None:
                    raise ParameterError("freezing tv-admm needs a reference solve or a point f")
                reference = G(f)
            self.schedule = reference.trace
        self.matrix = G.matrix() if G.linear else None

    @property
    def differentiable(self):
        G = self.G
        if G.solver_id == "pnp-pgd":
            return type(G.denoiser).vjp is not Denoiser.vjp
        return True

    def __call__(self, f):
        return self.evaluate(f)[0]

    def evaluate(self, f):
        """Return ``(values, state)`` where state feeds :meth:`vjp`."""
        G = self.G
        f = _check_f(G.A, f)
        if self.matrix is not None:
            return self.matrix @ f, None
        if G.solver_id == "tv-admm":
            return tv_admm_frozen(G.A, f, self.schedule)
        rec = G(f, keep_trace=True)
        return rec.values, rec.trace

    def vjp(self, f, cotangent, state=None):
        """Gradient w.r.t. f of ``<cotangent, G(f)>``."""
        G = self.G
        if self.matrix is not None:
            return self.matrix.T @ np.asarray(cotangent, dtype=np.float64)
        if state is None:
            _, state = self.evaluate(f)
        if G.solver_id == "tv-admm":
            return tv_admm_vjp(G.A, state, cotangent)
        fbar, u0bar = pnp_vjp(G.A, G.denoiser, state, cotangent)
        if G.u0 is None:
            fbar = fbar + tikhonov_matrix(G.A, None, G.params.pnp_init_alpha).T @ u0bar
        return fbar


def reconstruct(solver_id, A, f, params=None, **kwargs):
    """Uniform entry point; see :class:`Reconstructor` for keyword arguments."""
    return Reconstructor(solver_id, A, params, **kwargs)(f)
