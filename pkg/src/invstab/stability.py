"""Stability bound verification, Bregman distances and robustness metrics.

For two solves ``u_i = G(f_i)`` of one convex variational problem with
certificates ``p_i`` the bound reads::

    1/2 ||f1 - f2||^2 >= 1/2 ||A u1 - A u2||^2 + <p1 - p2, u1 - u2>

and comes from the exact identity
``||A du||^2 - <df, A du> + <dp, du> = 0`` of the optimality conditions.
"""

import csv
import math
import statistics
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from invstab import io
from invstab.errors import NotApplicableError, NumericalError, ParameterError
from invstab.signals import rng_for
from invstab.solvers import _diff, _diff_t

EPS = np.finfo(np.float64).eps
REGULARIZERS = ("tikhonov", "tv-admm")


@dataclass(frozen=True)
class TolerancePolicy:
    abs_tol: float = 1e-6
    rel_tol: float = 1e-8

    def threshold(self, lhs):
        return self.abs_tol + self.rel_tol * abs(lhs)


@dataclass
class StabilityReport:
    lhs: float
    data_term: float
    bregman: float
    slack: float
    violated: bool
    tolerance_used: float
    regularizer_id: str
    pair_provenance: dict = field(default_factory=dict)
    identity_residual: float = float("nan")
    identity_tolerance: float = float("nan")

    @property
    def rhs(self):
        return self.data_term + self.bregman

    @property
    def identity_holds(self):
        return abs(self.identity_residual) <= self.identity_tolerance

    def to_dict(self):
        out = asdict(self)
        out["rhs"] = self.rhs
        return out


def tikhonov_certificate(alpha, u, D=None):
    """``alpha D^T D u``, the gradient of ``(alpha/2)||Du||^2``."""
    u = np.asarray(u, dtype=np.float64)
    if D is None:
        return alpha * _diff_t(_diff(u))
    D = getattr(D, "entries", D)
    return alpha * (D.T @ (D @ u))


def _apply_d(D, x):
    if D is None:
        return _diff(x)
    return getattr(D, "entries", D) @ x


def bregman_distance(regularizer_id, alpha, D, u1, u2, p1, p2, check=True):
    """Symmetric Bregman distance ``<p1 - p2, u1 - u2>`` from certificates.

    ``D=None`` means the forward-difference operator. For the quadratic
    regularizer the value is also computed in closed form,
    ``alpha ||D(u1 - u2)||^2``, and a mismatch beyond 1e-9 relative raises.
    """
    if p1 is None or p2 is None:
        raise NotApplicableError("Bregman distance needs subgradient certificates from a variational solver")
    if regularizer_id not in REGULARIZERS:
        raise ParameterError(f"unknown regularizer {regularizer_id!r}; expected one of {REGULARIZERS}")
    du = np.asarray(u1, dtype=np.float64) - np.asarray(u2, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    value = float(np.dot(p1 - p2, du))
    if regularizer_id == "tikhonov" and check:
        ddu = _apply_d(D, du)
        closed = float(alpha * np.dot(ddu, ddu))
        # rounding in p1 - p2 scales with the certificates, not their difference
        allowance = 1e-9 * abs(closed) + 64 * EPS * (np.linalg.norm(p1) + np.linalg.norm(p2)) * np.linalg.norm(du)
        if abs(value - closed) > allowance:
            raise NumericalError(
                f"certificate Bregman distance {value!r} disagrees with closed form {closed!r}"
            )
    return value


def _solver_tolerance(rec):
    tol = rec.diagnostics.optimality_tolerance
    return tol if math.isfinite(tol) else 0.0


def verify_stability_bound(A, f1, f2, r1, r2, tolerance_policy=None, regularizer=None,
                           alpha=None, D=None, provenance=None):
    """Evaluate both sides of the stability bound for one pair of solves.

    By default the solver certificates stored in ``r1``, ``r2`` are used.
    Passing ``regularizer="tikhonov"`` with ``alpha`` evaluates the quadratic
    regularizer's quantities on arbitrary reconstructions (cross-regularizer
    check); such certificates are generally invalid, which is the point.
    """
    policy = tolerance_policy or TolerancePolicy()
    if r1.solver_id != r2.solver_id:
        warnings.warn(
            f"stability bound evaluated on mixed solvers {r1.solver_id!r} and {r2.solver_id!r}",
            stacklevel=2,
        )
    Am = getattr(A, "entries", A)
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    u1, u2 = r1.values, r2.values
    if regularizer is None:
        regularizer = r1.solver_id
        if r1.subgradient is None or r2.subgradient is None:
            raise NotApplicableError(f"solver {r1.solver_id!r} provides no certificate")
        p1, p2 = r1.subgradient, r2.subgradient
        alpha = r1.regularization_strength if alpha is None else alpha
        own = True
    elif regularizer == "tikhonov":
        if alpha is None:
            raise ParameterError("cross-regularizer evaluation needs alpha")
        p1, p2 = tikhonov_certificate(alpha, u1, D), tikhonov_certificate(alpha, u2, D)
        own = r1.solver_id == "tikhonov" and r2.solver_id == "tikhonov"
    else:
        raise ParameterError(f"cross-regularizer evaluation supports 'tikhonov' only, got {regularizer!r}")

    df = f1 - f2
    du = u1 - u2
    Adu = Am @ du
    lhs = 0.5 * float(df @ df)
    adu2 = float(Adu @ Adu)
    data_term = 0.5 * adu2
    bregman = bregman_distance(regularizer, alpha, D, u1, u2, p1, p2)
    slack = lhs - data_term - bregman
    threshold = policy.threshold(lhs)

    cross = float(df @ Adu)
    identity = adu2 - cross + bregman
    if own:
        scale = abs(adu2) + abs(cross) + abs(bregman)
        id_tol = 10.0 * (_solver_tolerance(r1) + _solver_tolerance(r2)) * float(np.linalg.norm(du)) \
            + 1e-12 * scale
    else:
        id_tol = float("nan")
    prov = {"solver_1": r1.solver_id, "solver_2": r2.solver_id, "regularizer": regularizer,
            "alpha": float(alpha)}
    prov.update(provenance or {})
    return StabilityReport(
        lhs=lhs,
        data_term=data_term,
        bregman=bregman,
        slack=slack,
        violated=bool(slack < -threshold),
        tolerance_used=threshold,
        regularizer_id=regularizer,
        pair_provenance=prov,
        identity_residual=identity,
        identity_tolerance=id_tol,
    )


# ---------------------------------------------------------------- metrics


METRIC_LABELS = {
    "clean_error": "||u_hat-u_gt||^2",
    "adv_error": "||u_hat_adv-u_gt||^2",
    "clean_consistency": "||Au_hat-f||^2",
    "adv_consistency": "||Au_hat_adv-f_adv||^2",
    "output_data_gap": "||Au_hat-Au_hat_adv||^2",
    "smoothness_gap": "||Du_hat-Du_hat_adv||^2",
    "output_gap": "||u_hat-u_hat_adv||^2",
    "input_gap": "||f-f_adv||^2",
    "lipschitz_ratio": "||u_hat-u_hat_adv||^2/||f-f_adv||^2",
}
METRIC_FIELDS = tuple(METRIC_LABELS)


@dataclass
class MetricsRow:
    solver_id: str
    instance: str
    clean_error: float
    adv_error: float
    clean_consistency: float
    adv_consistency: float
    output_data_gap: float
    smoothness_gap: float
    output_gap: float
    input_gap: float
    lipschitz_ratio: float

    def metrics(self):
        return {k: getattr(self, k) for k in METRIC_FIELDS}


def _sq(x):
    return float(np.dot(x, x))


def metrics_row(label, instance, A, u_gt, f, u_hat, f_adv, u_adv):
    """All Table-style quantities for one solver on one instance."""
    Am = getattr(A, "entries", A)
    Au, Au_adv = Am @ u_hat, Am @ u_adv
    output_gap = _sq(u_hat - u_adv)
    input_gap = _sq(f - f_adv)
    return MetricsRow(
        solver_id=label,
        instance=str(instance),
        clean_error=_sq(u_hat - u_gt),
        adv_error=_sq(u_adv - u_gt),
        clean_consistency=_sq(Au - f),
        adv_consistency=_sq(Au_adv - f_adv),
        output_data_gap=_sq(Au - Au_adv),
        smoothness_gap=_sq(_diff(u_hat - u_adv)),
        output_gap=output_gap,
        input_gap=input_gap,
        lipschitz_ratio=output_gap / input_gap if input_gap > 0 else float("nan"),
    )


def aggregate_rows(rows):
    """Mean and median rows per solver label, in first-appearance order."""
    groups = {}
    for row in rows:
        groups.setdefault(row.solver_id, []).append(row)
    out = []
    for label, group in groups.items():
        for name, reducer in (("mean", statistics.fmean), ("median", statistics.median)):
            values = {}
            for key in METRIC_FIELDS:
                col = [getattr(r, key) for r in group if not math.isnan(getattr(r, key))]
                values[key] = float(reducer(col)) if col else float("nan")
            out.append(MetricsRow(solver_id=label, instance=name, **values))
    return out


def metrics_table(instances, solvers, attack_config, A=None, aggregate=True, attack=None):
    """Attack every solver with its own FGSM delta and tabulate the metrics.

    ``instances`` is a sequence of ``(Signal, Measurement)`` pairs or a
    :class:`~invstab.signals.Dataset`; ``solvers`` maps labels to
    :class:`~invstab.solvers.Reconstructor` objects. Returns per-instance rows
    followed by mean and median rows when ``aggregate`` is set.
    """
    from invstab.attacks import fgsm

    attack = attack or fgsm
    pairs = list(instances.pairs() if hasattr(instances, "pairs") else instances)
    rows = []
    for label, G in solvers.items():
        Aop = A or G.A
        for idx, (sig, meas) in enumerate(pairs):
            u_gt = getattr(sig, "values", sig)
            f = getattr(meas, "values", meas)
            clean = G(f)
            res = attack(G, Aop, f, u_gt, attack_config, clean=clean)
            rows.append(metrics_row(label, idx, Aop, u_gt, f, clean.values, res.f_adv,
                                    res.reconstruction_adv.values))
    if aggregate:
        rows = rows + aggregate_rows(rows)
    return rows


def write_metrics_csv(path, rows):
    path = Path(path)
    header = ["solver", "instance"] + [METRIC_LABELS[k] for k in METRIC_FIELDS]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([row.solver_id, row.instance]
                            + [io.format_float(getattr(row, k)) for k in METRIC_FIELDS])
    return path


def write_metrics_json(path, rows):
    payload = {
        "labels": dict(METRIC_LABELS),
        "rows": [asdict(r) for r in rows],
    }
    return io.dump_json(path, payload)


def read_metrics_json(path):
    payload = io.load_json(path)
    names = {f.name for f in fields(MetricsRow)}
    rows = []
    for row in payload["rows"]:
        kwargs = {k: v for k, v in row.items() if k in names}
        for key in METRIC_FIELDS:
            kwargs[key] = float(kwargs[key])  # non-finite values are stored as strings
        rows.append(MetricsRow(**kwargs))
    return rows


def write_scatter(path, reports, worst_case_epsilon=None, m=None, title=None):
    """Two-column plot data: ``lhs`` and ``data_term + bregman`` per pair.

    With ``worst_case_epsilon`` and ``m`` the first column is the worst-case
    bound ``m * eps^2 / 2`` instead of the per-pair left-hand side.
    """
    path = Path(path)
    worst = None
    if worst_case_epsilon is not None:
        if m is None:
            raise ParameterError("worst-case scatter data needs the measurement count m")
        worst = 0.5 * m * worst_case_epsilon ** 2
    with open(path, "w") as fh:
        if title:
            fh.write(f"# {title}\n")
        first = "bound_worst_case" if worst is not None else "lhs"
        fh.write(f"# {first} data_term_plus_bregman\n")
        for rep in reports:
            x = worst if worst is not None else rep.lhs
            fh.write(f"{io.format_float(x)} {io.format_float(rep.rhs)}\n")
    return path


def read_scatter(path):
    data = [line.split() for line in Path(path).read_text().splitlines()
            if line.strip() and not line.startswith("#")]
    return np.array([[float(a), float(b)] for a, b in data]).reshape(-1, 2)


# ---------------------------------------------------------------- Lipschitz scans


@dataclass
class LipschitzScan:
    """Largest observed ratio ``||G(f+d) - G(f)|| / ||d||``: a lower bound
    on the local Lipschitz constant, never an estimate of it."""

    lower_bound: float
    ratios: list
    source: str
    skipped: int = 0

    def __float__(self):
        return float(self.lower_bound)


def lipschitz_ratio_scan(G, f, perturbation_source="gaussian", trials=8, scale=1.0, seed=0,
                         ascent_steps=20):
    """Lower bound on the local Lipschitz constant of ``G`` at ``f``.

    ``perturbation_source`` is ``"gaussian"``, ``"adversarial"`` (normalized
    gradient ascent on the ratio through the solver's frozen map, started
    from a Gaussian draw) or a callable ``rng -> delta``. Zero draws are
    skipped.
    """
    if int(trials) != trials or trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    f = np.asarray(f, dtype=np.float64)
    base_rec = G(f)
    base = getattr(base_rec, "values", base_rec)
    frozen = None
    if perturbation_source == "adversarial" and hasattr(G, "freeze"):
        frozen = G.freeze(base_rec, f)
    ratios, skipped = [], 0

    def evaluate(x):
        out = G(x)
        return getattr(out, "values", out)

    for t in range(int(trials)):
        rng = rng_for(seed, 0x115C + t)
        if callable(perturbation_source):
            delta = np.asarray(perturbation_source(rng), dtype=np.float64)
        elif perturbation_source in ("gaussian", "adversarial"):
            delta = rng.standard_normal(f.size)
        else:
            raise ParameterError(f"unknown perturbation source {perturbation_source!r}")
        norm = float(np.linalg.norm(delta))
        if norm == 0.0:
            skipped += 1
            continue
        if not callable(perturbation_source):
            delta *= scale / norm
        ratios.append(float(np.linalg.norm(evaluate(f + delta) - base)) / float(np.linalg.norm(delta)))
        if perturbation_source == "adversarial":
            if frozen is None:
                raise ParameterError("adversarial scans need a reconstructor with freeze()")
            anchor = frozen(f)
            for _ in range(int(ascent_steps)):
                x = f + delta
                values, state = frozen.evaluate(x)
                g = frozen.vjp(x, values - anchor, state)
                gn = float(np.linalg.norm(g))
                if gn == 0.0:
                    break
                delta = scale * g / gn
                ratios.append(float(np.linalg.norm(evaluate(f + delta) - base)) / scale)
    if not ratios:
        raise ParameterError("every perturbation draw was zero")
    label = perturbation_source if isinstance(perturbation_source, str) else "custom"
    return LipschitzScan(max(ratios), ratios, label, skipped)
