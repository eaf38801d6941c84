"""l-infinity bounded adversarial perturbations of the measurement (FGSM, PGD).

The attacked quantity is ``phi(delta) = ||G(f + delta) - target||_2`` with
``target`` either the ground truth (``deviation-from-ground-truth``) or the
clean reconstruction ``G(f)`` (``deviation-from-clean``).

Iterative solvers are attacked through their frozen version (fixed
iteration count and penalty schedule taken from the clean solve), which is
a fixed piecewise-smooth map of f. Reported objective values always come
from a fresh solve at ``f + delta``.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from invstab import io
from invstab.errors import BackendError, ParameterError
from invstab.signals import rng_for
from invstab.solvers import Reconstruction, Reconstructor

OBJECTIVES = ("deviation-from-ground-truth", "deviation-from-clean")
BACKENDS = ("closed-form", "unrolled-adjoint", "finite-difference")
PROBE_SCALE = 1e-6
_STREAM_PROBE = 0xA770
_STREAM_RESTART = 0xA800


@dataclass
class AttackConfig:
    epsilon: float = 0.2
    step_size: Optional[float] = None  # PGD; None means epsilon / 4
    steps: int = 40
    restarts: int = 4
    objective: str = "deviation-from-ground-truth"
    gradient_backend: str = "auto"
    seed: int = 0
    include_fgsm_start: bool = True
    monotone: bool = True
    grad_check_coords: int = 0

    def validate(self):
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ParameterError(f"epsilon must be a nonnegative real, got {self.epsilon}")
        if self.objective not in OBJECTIVES:
            raise ParameterError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.gradient_backend not in BACKENDS + ("auto",):
            raise ParameterError(f"unknown gradient backend {self.gradient_backend!r}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if int(self.restarts) != self.restarts or self.restarts < 0:
            raise ParameterError(f"restarts must be >= 0, got {self.restarts}")
        step = self.pgd_step
        if not step >= 0 or step > 2 * self.epsilon:
            raise ParameterError(f"step_size must lie in [0, 2*epsilon], got {step}")
        return self

    @property
    def pgd_step(self):
        return self.epsilon / 4 if self.step_size is None else float(self.step_size)


@dataclass
class AttackResult:
    delta: np.ndarray
    f_adv: np.ndarray
    reconstruction_adv: Reconstruction
    objective_value: float
    objective_trace: list
    backend_used: str
    method: str
    measurement_consistency: float
    grad_check: Optional[dict] = None
    config: dict = field(default_factory=dict)

    def summary(self):
        return {
            "method": self.method,
            "objective_value": self.objective_value,
            "objective_trace": list(self.objective_trace),
            "backend_used": self.backend_used,
            "measurement_consistency": self.measurement_consistency,
            "delta_linf": float(np.max(np.abs(self.delta))) if self.delta.size else 0.0,
            "delta_l2_sq": float(self.delta @ self.delta),
            "grad_check": self.grad_check,
            "config": dict(self.config),
            "reconstruction": self.reconstruction_adv.sidecar(),
        }


def save_attack_result(result, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    io.write_array(directory / "delta.invr", result.delta)
    io.write_array(directory / "f_adv.invr", result.f_adv)
    io.write_array(directory / "u_adv.invr", result.reconstruction_adv.values)
    io.dump_json(directory / "attack.json", result.summary())
    return directory


def sign(x):
    """Elementwise sign with ``sign(0) = 0``."""
    return np.sign(x)


def resolve_backend(G, backend):
    if backend == "auto":
        return "closed-form" if G.linear else "unrolled-adjoint"
    if backend == "closed-form" and not G.linear:
        raise BackendError(f"closed-form gradients need a linear solver, got {G.solver_id}")
    if backend == "unrolled-adjoint":
        if G.linear:
            raise BackendError(f"{G.solver_id} is linear; use the closed-form backend")
        if G.solver_id == "pnp-pgd" and not _pnp_differentiable(G):
            raise BackendError(f"denoiser {G.denoiser.name!r} provides no derivative")
    return backend


def _pnp_differentiable(G):
    from invstab.solvers import Denoiser

    return type(G.denoiser).vjp is not Denoiser.vjp


def fd_step(f):
    return 1e-5 * (1.0 + float(np.max(np.abs(f))))


def _objective(values, target):
    return float(np.linalg.norm(values - target))


def finite_difference_gradient(frozen, f, delta, target, coords=None, h=None):
    """Central differences of ``||frozen(f + delta) - target||`` per coordinate."""
    f = np.asarray(f, dtype=np.float64)
    base = f + delta
    h = fd_step(f) if h is None else h
    coords = range(f.size) if coords is None else coords
    out = np.zeros(f.size)
    for j in coords:
        e = np.zeros(f.size)
        e[j] = h
        plus = _objective(frozen(base + e), target)
        minus = _objective(frozen(base - e), target)
        out[j] = (plus - minus) / (2.0 * h)
    return out


def attack_gradient(G, A, f, delta, target, backend="auto", frozen=None, return_info=False):
    """Gradient w.r.t. delta of ``||G(f + delta) - target||_2``.

    At a zero residual the norm is not differentiable; the zero vector is
    returned and ``info["nondifferentiable"]`` is set.
    """
    backend = resolve_backend(G, backend)
    f = np.asarray(f, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if frozen is None:
        frozen = G.freeze(f=f)
    x = f + delta
    info = {"backend": backend, "nondifferentiable": False}
    if backend == "finite-difference":
        values = frozen(x)
        r = values - target
        if not np.any(r):
            info["nondifferentiable"] = True
            grad = np.zeros(f.size)
        else:
            grad = finite_difference_gradient(frozen, f, delta, target)
    else:
        values, state = frozen.evaluate(x)
        r = values - target
        norm = float(np.linalg.norm(r))
        if norm == 0.0:
            info["nondifferentiable"] = True
            grad = np.zeros(f.size)
        else:
            grad = frozen.vjp(x, r / norm, state)
    return (grad, info) if return_info else grad


def gradient_check(G, A, f, delta, target, backend="auto", coords=None, frozen=None,
                   rel_tol=None, seed=0, count=16):
    """Compare a gradient backend with central finite differences.

    Relative error per coordinate is ``|g - fd| / max(|g|, |fd|, 1e-8 ||g||)``.
    """
    backend = resolve_backend(G, backend)
    f = np.asarray(f, dtype=np.float64)
    if frozen is None:
        frozen = G.freeze(f=f)
    if coords is None:
        rng = rng_for(seed, 0xC0DE)
        coords = np.sort(rng.choice(f.size, size=min(count, f.size), replace=False))
    grad = attack_gradient(G, A, f, delta, target, backend, frozen)
    fd = finite_difference_gradient(frozen, f, delta, target, coords)
    coords = np.asarray(coords)
    g, d = grad[coords], fd[coords]
    floor = 1e-8 * float(np.linalg.norm(grad))
    denom = np.maximum(np.maximum(np.abs(g), np.abs(d)), max(floor, 1e-300))
    rel = np.abs(g - d) / denom
    if rel_tol is None:
        rel_tol = 1e-4 if backend == "closed-form" else 1e-2
    return {
        "backend": backend,
        "coords": coords.tolist(),
        "relative_errors": rel.tolist(),
        "max_relative_error": float(rel.max()) if rel.size else 0.0,
        "tolerance": float(rel_tol),
        "failures": int(np.count_nonzero(rel > rel_tol)),
    }


class _AttackProblem:
    """Shared state of one attack: frozen map, target and probe."""

    def __init__(self, G, A, f, u_gt, config, clean=None):
        self.G = G
        self.A = A
        self.f = np.asarray(f, dtype=np.float64)
        if self.f.shape != (A.rows,):
            raise ParameterError(f"measurement length {self.f.shape} does not match operator rows {A.rows}")
        self.config = config
        self.backend = resolve_backend(G, config.gradient_backend)
        self.clean = clean if clean is not None else G(self.f)
        self.frozen = G.freeze(self.clean, self.f)
        if config.objective == "deviation-from-ground-truth":
            if u_gt is None:
                raise ParameterError("deviation-from-ground-truth needs the ground truth u_gt")
            self.target = np.asarray(getattr(u_gt, "values", u_gt), dtype=np.float64)
        else:
            self.target = self.clean.values
        rng = rng_for(config.seed, _STREAM_PROBE)
        self.probe = PROBE_SCALE * config.epsilon * rng.uniform(-1.0, 1.0, A.rows)

    def gradient(self, delta):
        # the norm is not differentiable where G(f + delta) == G(f); step off the origin
        if self.config.objective == "deviation-from-clean" and not np.any(delta):
            delta = self.probe
        return attack_gradient(self.G, self.A, self.f, delta, self.target, self.backend, self.frozen)

    def frozen_objective(self, delta):
        return _objective(self.frozen(self.f + delta), self.target)

    def finish(self, delta, method, trace, grad_check=None):
        f_adv = self.f + delta
        rec = self.G(f_adv)
        value = _objective(rec.values, self.target)
        resid = self.A.entries @ rec.values - f_adv
        cfg = asdict(self.config)
        cfg["step_size"] = self.config.pgd_step
        return AttackResult(
            delta=delta,
            f_adv=f_adv,
            reconstruction_adv=rec,
            objective_value=value,
            objective_trace=list(trace),
            backend_used=self.backend,
            method=method,
            measurement_consistency=float(resid @ resid),
            grad_check=grad_check,
            config=cfg,
        )

    def maybe_grad_check(self, delta):
        count = int(self.config.grad_check_coords)
        if count <= 0:
            return None
        if self.config.objective == "deviation-from-clean" and not np.any(delta):
            delta = self.probe
        return gradient_check(self.G, self.A, self.f, delta, self.target, self.backend,
                              frozen=self.frozen, seed=self.config.seed, count=count)


def _fgsm_delta(problem):
    eps = problem.config.epsilon
    if eps == 0:
        return np.zeros(problem.A.rows)
    return eps * sign(problem.gradient(np.zeros(problem.A.rows)))


def fgsm(G, A, f, u_gt=None, config=None, clean=None):
    """One full-budget signed gradient step from delta = 0."""
    config = (config or AttackConfig()).validate()
    problem = _AttackProblem(G, A, f, u_gt, config, clean)
    delta = _fgsm_delta(problem)
    start = _objective(problem.clean.values, problem.target)
    check = problem.maybe_grad_check(np.zeros(A.rows))
    result = problem.finish(delta, "fgsm", [start], check)
    result.objective_trace.append(result.objective_value)
    return result


def _pgd_from(problem, start):
    cfg = problem.config
    eps, step = cfg.epsilon, cfg.pgd_step
    delta = start.copy()
    value = problem.frozen_objective(delta)
    best_value, best = value, delta.copy()
    trace = [value]
    for _ in range(int(cfg.steps)):
        g = problem.gradient(delta)
        delta = np.clip(delta + step * sign(g), -eps, eps)
        value = problem.frozen_objective(delta)
        if value > best_value:
            best_value, best = value, delta.copy()
        trace.append(best_value if cfg.monotone else value)
    return best if cfg.monotone else delta, trace


def pgd(G, A, f, u_gt=None, config=None, clean=None, workers=1):
    """Projected signed-gradient ascent from several starts.

    Starts: the origin, the FGSM point (``include_fgsm_start``) and
    ``restarts`` uniform points of the l-inf ball, each seeded separately.
    Every start and its best iterate are re-evaluated with a fresh solve;
    the largest objective wins (earliest candidate on ties).
    """
    config = (config or AttackConfig()).validate()
    problem = _AttackProblem(G, A, f, u_gt, config, clean)
    m = A.rows
    eps = config.epsilon
    starts = [np.zeros(m)]
    if config.include_fgsm_start:
        starts.append(_fgsm_delta(problem))
    for i in range(int(config.restarts)):
        rng = rng_for(config.seed, _STREAM_RESTART + i)
        starts.append(rng.uniform(-eps, eps, m))

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(lambda s: _pgd_from(problem, s), starts))
    else:
        runs = [_pgd_from(problem, s) for s in starts]

    candidates = []
    for start, (final, _) in zip(starts, runs):
        candidates.append(start)
        if not np.array_equal(final, start):
            candidates.append(final)
    best_result, best_trace = None, None
    for cand in candidates:
        res = problem.finish(cand, "pgd", [])
        if best_result is None or res.objective_value > best_result.objective_value:
            best_result = res
    for start, (final, trace) in zip(starts, runs):
        if np.array_equal(final, best_result.delta) or np.array_equal(start, best_result.delta):
            best_trace = trace
            break
    best_result.objective_trace = list(best_trace or [])
    best_result.grad_check = problem.maybe_grad_check(np.zeros(m))
    return best_result


def replay_delta(G, f, delta, target=None):
    """Evaluate a perturbation crafted for any solver on ``G`` (transfer harness).

    Returns ``(reconstruction, deviation)`` where the deviation is measured
    against ``target`` (default: ``G(f)``).
    """
    f = np.asarray(f, dtype=np.float64)
    rec = G(f + np.asarray(delta, dtype=np.float64))
    ref = G(f).values if target is None else np.asarray(getattr(target, "values", target))
    return rec, _objective(rec.values, ref)


def make_attacker(method):
    if method == "fgsm":
        return fgsm
    if method == "pgd":
        return pgd
    raise ParameterError(f"unknown attack method {method!r}; expected 'fgsm' or 'pgd'")
