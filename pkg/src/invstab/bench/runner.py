"""Benchmark pipeline: datasets, alpha search, solves, attacks, bound checks, reports."""

import csv
import dataclasses
import math
import re
import statistics
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

import invstab
from invstab import io, kernels
from invstab.attacks import make_attacker
from invstab.errors import InvstabError, ParameterError, SearchError, StageError
from invstab.linops import finite_difference_matrix
from invstab.signals import generate_operator, make_dataset, prng_metadata, rng_for, save_dataset
from invstab.solvers import Reconstructor, SolverParams, learned_linear_fit
from invstab.stability import (
    METRIC_FIELDS,
    METRIC_LABELS,
    TolerancePolicy,
    aggregate_rows,
    metrics_row,
    verify_stability_bound,
    write_metrics_csv,
    write_metrics_json,
    write_scatter,
)

STAGES = ("dataset", "grid-search", "fit", "evaluate", "report")
_STREAM_GAUSSIAN = 0x6A550000


def _pmap(fn, items, workers):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _sq(x):
    return float(np.dot(x, x))


# ---------------------------------------------------------------- grid search


@dataclass
class GridSearchResult:
    alpha: float
    table: list  # dicts with alpha, score, failures

    def to_dict(self):
        return {"alpha": self.alpha, "table": list(self.table)}


def grid_search_alpha(solver_id, grid, validation, A, params=None, workers=1, D=None):
    """Regularization strength minimizing mean ``||u_hat - u_gt||^2`` on ``validation``.

    A grid point where any solve fails is disqualified. Exact ties go to
    the larger alpha.
    """
    grid = [float(a) for a in grid]
    if not grid:
        raise ParameterError("alpha grid is empty")
    pairs = list(validation.pairs() if hasattr(validation, "pairs") else validation)
    if not pairs:
        raise ParameterError("validation set is empty")
    base = params or SolverParams()

    def score(alpha):
        failures, errors = [], []
        try:
            G = Reconstructor(solver_id, A, dataclasses.replace(base, alpha=alpha), D=D)
        except InvstabError as exc:
            return {"alpha": alpha, "score": float("nan"), "failures": [str(exc)]}
        for idx, (sig, meas) in enumerate(pairs):
            try:
                rec = G(getattr(meas, "values", meas))
                errors.append(_sq(rec.values - getattr(sig, "values", sig)))
            except (InvstabError, ArithmeticError, np.linalg.LinAlgError) as exc:
                failures.append(f"instance {idx}: {exc}")
        value = statistics.fmean(errors) if errors and not failures else float("nan")
        return {"alpha": alpha, "score": value, "failures": failures}

    table = _pmap(score, grid, workers)
    valid = [row for row in table if math.isfinite(row["score"])]
    if not valid:
        raise SearchError("every grid point failed", [f for row in table for f in row["failures"]])
    best = min(row["score"] for row in valid)
    alpha = max(row["alpha"] for row in valid if row["score"] == best)
    return GridSearchResult(alpha, table)


# ---------------------------------------------------------------- pipeline


@dataclass
class BenchResult:
    config: object
    rows: list = field(default_factory=list)
    aggregates: list = field(default_factory=list)
    stability: list = field(default_factory=list)
    attacks: list = field(default_factory=list)
    grid: Optional[GridSearchResult] = None
    tuned_alpha: Optional[float] = None
    stages: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)

    @property
    def complete(self):
        return all(self.stages.get(s) in ("ok", "skipped") for s in STAGES)


def build_solvers(config, A, tuned_alpha=None, learned=None):
    D = finite_difference_matrix(config.n)
    solvers = {}
    for spec in config.solvers:
        params = spec.solver_params(tuned_alpha)
        solvers[spec.label] = Reconstructor(spec.id, A, params, D=D if spec.id == "tikhonov" else None,
                                            learned=learned if spec.id == "learned-linear" else None,
                                            label=spec.label)
    return solvers


def _stability_record(label, idx, perturbation, report, converged):
    return {
        "solver": label,
        "instance": idx,
        "perturbation": perturbation,
        "regularizer": report.regularizer_id,
        "alpha": report.pair_provenance["alpha"],
        "lhs": report.lhs,
        "data_term": report.data_term,
        "bregman": report.bregman,
        "rhs": report.rhs,
        "slack": report.slack,
        "violated": report.violated,
        "tolerance": report.tolerance_used,
        "identity_residual": report.identity_residual,
        "identity_tolerance": report.identity_tolerance,
        "converged": converged,
    }


def evaluate_instance(config, A, solvers, sig, meas, idx):
    """Clean solve, attack, equal-norm Gaussian perturbation and bound checks for one instance."""
    policy = TolerancePolicy(config.stability.abs_tol, config.stability.rel_tol)
    attacker = make_attacker(config.attack.method)
    seeds = config.seeds
    f, u_gt = meas.values, sig.values
    rows, stability, attacks = [], [], []
    for label, G in solvers.items():
        clean = G(f)
        cfg = dataclasses.replace(config.attack.config, seed=seeds.effective("attack") + idx)
        atk = attacker(G, A, f, u_gt, cfg, clean=clean)
        adv = atk.reconstruction_adv
        rows.append(metrics_row(label, idx, A, u_gt, f, clean.values, atk.f_adv, adv.values))

        rng = rng_for(seeds.effective("perturbation"), _STREAM_GAUSSIAN + idx)
        g = rng.standard_normal(A.rows)
        dnorm = float(np.linalg.norm(atk.delta))
        g *= dnorm / float(np.linalg.norm(g)) if dnorm > 0 else 0.0
        gauss = G(f + g)
        attacks.append({
            "solver": label,
            "instance": idx,
            "objective_value": atk.objective_value,
            "measurement_consistency": atk.measurement_consistency,
            "backend": atk.backend_used,
            "delta_l2_sq": dnorm ** 2,
            "gaussian_output_gap": _sq(gauss.values - clean.values),
            "clean_converged": clean.diagnostics.converged,
            "adv_converged": adv.diagnostics.converged,
        })
        pairs = (("adversarial", atk.f_adv, adv), ("gaussian", f + g, gauss))
        if G.variational:
            for name, f2, r2 in pairs:
                rep = verify_stability_bound(A, f, f2, clean, r2, policy, provenance={"instance": idx})
                converged = clean.diagnostics.converged and r2.diagnostics.converged
                stability.append(_stability_record(label, idx, name, rep, converged))
        for cross in config.stability.cross:
            if cross.solver != label:
                continue
            for name, f2, r2 in pairs:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    rep = verify_stability_bound(A, f, f2, clean, r2, policy, regularizer=cross.regularizer,
                                                 alpha=cross.alpha, provenance={"instance": idx})
                stability.append(_stability_record(label, idx, f"cross-{name}", rep, False))
    return rows, stability, attacks


def run_benchmark(config, out=None, progress=None):
    """Run every stage and write artifacts to ``out`` (default ``config.output``).

    A failing stage raises :class:`StageError`; the manifest written before
    raising marks the run incomplete.
    """
    config = config.validate()
    out = Path(out if out is not None else config.output)
    result = BenchResult(config)
    state = {}
    say = progress or (lambda msg: None)

    def stage(name, fn):
        say(f"[{name}]")
        t0 = time.perf_counter()
        try:
            value = fn()
        except (InvstabError, OSError, ArithmeticError, np.linalg.LinAlgError) as exc:
            result.stages[name] = "failed"
            result.timings[name] = time.perf_counter() - t0
            try:
                write_manifest(result, out)
            except OSError:
                pass
            raise StageError(name, exc) from exc
        result.stages[name] = "ok" if value is not False else "skipped"
        result.timings[name] = time.perf_counter() - t0
        return value

    def make_data():
        sizes, seeds = config.datasets, config.seeds
        A = generate_operator(config.m, config.n, config.operator.mean, config.operator.variance,
                              seeds.effective("operator"))
        common = dict(noise_std=config.noise_std, jump_count_range=config.signal.jump_count_range,
                      height_range=config.signal.height_range)
        state["A"] = A
        state["test"] = make_dataset(A, sizes.test, config.n, seeds.effective("test"), **common)
        needs_val = any(s.alpha_is_tuned() for s in config.solvers)
        state["validation"] = make_dataset(A, sizes.validation if needs_val else 0, config.n,
                                           seeds.effective("validation"), **common)
        needs_train = any(s.id == "learned-linear" for s in config.solvers)
        state["train"] = make_dataset(A, sizes.train if needs_train else 0, config.n,
                                      seeds.effective("train"), **common)
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(state["test"], out / "dataset")

    def search():
        if not any(s.alpha_is_tuned() for s in config.solvers):
            return False
        grid = grid_search_alpha(config.grid.solver, config.grid.values(), state["validation"],
                                 state["A"], workers=config.workers)
        result.grid = grid
        result.tuned_alpha = grid.alpha
        return True

    def fit():
        specs = [s for s in config.solvers if s.id == "learned-linear"]
        if not specs:
            return False
        state["learned"] = learned_linear_fit(state["train"].pairs(), specs[0].ridge)
        return True

    def evaluate():
        A = state["A"]
        solvers = build_solvers(config, A, result.tuned_alpha, state.get("learned"))
        test = state["test"]

        def one(i):
            return evaluate_instance(config, A, solvers, test.signals[i], test.measurements[i], i)

        outputs = _pmap(one, range(len(test)), config.workers)
        # regroup per solver so rows of one method are contiguous
        for label in solvers:
            for rows, stab, atks in outputs:
                result.rows.extend(r for r in rows if r.solver_id == label)
                result.stability.extend(s for s in stab if s["solver"] == label)
                result.attacks.extend(a for a in atks if a["solver"] == label)
        result.aggregates = aggregate_rows(result.rows)

    def report():
        result.artifacts = write_run_artifacts(result, out)

    stage("dataset", make_data)
    stage("grid-search", search)
    stage("fit", fit)
    stage("evaluate", evaluate)
    stage("report", report)
    write_manifest(result, out)
    return result


# ---------------------------------------------------------------- reports


def _slug(text):
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")


def _write_records_csv(path, records, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for rec in records:
            writer.writerow([io.format_float(rec[c]) if isinstance(rec[c], float) else rec[c] for c in columns])
    return Path(path)


STABILITY_COLUMNS = ("solver", "instance", "perturbation", "regularizer", "alpha", "lhs", "data_term",
                     "bregman", "rhs", "slack", "violated", "tolerance", "identity_residual",
                     "identity_tolerance", "converged")
GRID_COLUMNS = ("alpha", "score", "failures")


class _Report:
    """Minimal stand-in so :func:`scatter_groups` can treat dict records like reports."""

    def __init__(self, rec):
        self.lhs = rec["lhs"]
        self.rhs = rec["rhs"]


def scatter_groups(stability):
    groups = {}
    for rec in stability:
        groups.setdefault((rec["solver"], rec["perturbation"]), []).append(_Report(rec))
    return groups


def _md_escape(text):
    return text.replace("|", "\\|")


def _fmt(x):
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.4g}"


def summary_markdown(aggregates, stability=(), tuned_alpha=None):
    """Markdown tables (mean, median) with one row per method and the metric labels as columns."""
    header = ["Method"] + [_md_escape(METRIC_LABELS[k]) for k in METRIC_FIELDS]
    lines = ["# Benchmark summary", ""]
    if tuned_alpha is not None:
        lines += [f"Tuned TV alpha: {tuned_alpha!r}", ""]
    for kind in ("mean", "median"):
        lines += [f"## {kind.capitalize()} over test instances", ""]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for row in aggregates:
            if row.instance != kind:
                continue
            cells = [_md_escape(row.solver_id)] + [_fmt(getattr(row, k)) for k in METRIC_FIELDS]
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    if stability:
        lines += ["## Stability bound checks", "",
                  "| Method | Perturbation | Regularizer | Pairs | Violations | Median slack |",
                  "|---|---|---|---|---|---|"]
        groups = {}
        for rec in stability:
            groups.setdefault((rec["solver"], rec["perturbation"], rec["regularizer"]), []).append(rec)
        for (solver, pert, reg), recs in groups.items():
            viol = sum(r["violated"] for r in recs)
            med = statistics.median(r["slack"] for r in recs)
            lines.append(f"| {_md_escape(solver)} | {pert} | {reg} | {len(recs)} | {viol} | {_fmt(med)} |")
        lines.append("")
    return "\n".join(lines)


def emit_report(rows, out, formats=("csv", "json"), stability=None, grid=None, aggregates=None,
                worst_case=None, tuned_alpha=None):
    """Write metrics (CSV/JSON), bound-check data, scatter files and a markdown summary.

    ``rows`` are per-instance :class:`MetricsRow` objects; aggregates are
    computed when not given. Returns the written paths relative to ``out``.
    """
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    rows = list(rows)
    aggregates = aggregate_rows(rows) if aggregates is None else list(aggregates)
    written = []
    all_rows = rows + aggregates
    if "csv" in formats:
        written.append(write_metrics_csv(out / "metrics.csv", all_rows))
    if "json" in formats:
        written.append(write_metrics_json(out / "metrics.json", all_rows))
    if stability:
        if "csv" in formats:
            written.append(_write_records_csv(out / "stability.csv", stability, STABILITY_COLUMNS))
        if "json" in formats:
            written.append(io.dump_json(out / "stability.json", {"pairs": list(stability)}))
        scatter_dir = out / "scatter"
        scatter_dir.mkdir(exist_ok=True)
        for (solver, pert), reports in scatter_groups(stability).items():
            stem = f"{_slug(solver)}_{pert}"
            written.append(write_scatter(scatter_dir / f"{stem}.dat", reports, title=f"{solver} {pert}"))
            if worst_case is not None:
                eps, m = worst_case
                written.append(write_scatter(scatter_dir / f"{stem}_worst.dat", reports, eps, m,
                                             title=f"{solver} {pert} worst-case bound"))
    if grid is not None:
        table = [{"alpha": r["alpha"], "score": r["score"], "failures": len(r["failures"])}
                 for r in grid.table]
        if "csv" in formats:
            written.append(_write_records_csv(out / "grid_search.csv", table, GRID_COLUMNS))
        if "json" in formats:
            written.append(io.dump_json(out / "grid_search.json", grid.to_dict()))
    summary = out / "summary.md"
    summary.write_text(summary_markdown(aggregates, stability or (), tuned_alpha))
    written.append(summary)
    return sorted(str(Path(p).relative_to(out)) for p in written)


def write_run_artifacts(result, out):
    cfg = result.config
    files = emit_report(
        result.rows, out, cfg.formats, stability=result.stability, grid=result.grid,
        aggregates=result.aggregates, worst_case=(cfg.attack.config.epsilon, cfg.m),
        tuned_alpha=result.tuned_alpha,
    )
    if "json" in cfg.formats:
        io.dump_json(Path(out) / "attacks.json", {"attacks": result.attacks})
        files.append("attacks.json")
    return sorted(files)


def write_manifest(result, out):
    """Run manifest (JSON, deterministic) plus a separate wall-clock timings file."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    seeds = {name: cfg.seeds.effective(name) for name in
             ("operator", "test", "validation", "train", "attack", "perturbation")}
    manifest = {
        "format_version": io.FORMAT_VERSION,
        "library_version": invstab.__version__,
        "kernel_backend": kernels.backend_name(),
        "prng": prng_metadata(),
        "config": cfg.to_dict(),
        "effective_seeds": seeds,
        "tuned_alpha": result.tuned_alpha,
        "stages": {s: result.stages.get(s, "not-run") for s in STAGES},
        "complete": result.complete,
        "artifacts": list(result.artifacts),
        "timings_file": "timings.txt",
    }
    io.dump_json(out / "manifest.json", manifest)
    lines = ["# stage wall_clock_seconds"]
    lines += [f"{name} {result.timings[name]:.3f}" for name in STAGES if name in result.timings]
    (out / "timings.txt").write_text("\n".join(lines) + "\n")
    return out / "manifest.json"


def rewrite_report(directory, formats=("csv", "json")):
    """Regenerate summary and tables from a finished run's JSON artifacts."""
    from invstab.stability import read_metrics_json

    directory = Path(directory)
    rows = read_metrics_json(directory / "metrics.json")
    per_instance = [r for r in rows if r.instance not in ("mean", "median")]
    aggregates = [r for r in rows if r.instance in ("mean", "median")]
    stability = None
    if (directory / "stability.json").exists():
        stability = io.load_json(directory / "stability.json")["pairs"]
    tuned = None
    if (directory / "manifest.json").exists():
        tuned = io.load_json(directory / "manifest.json").get("tuned_alpha")
    return emit_report(per_instance, directory, formats, stability=stability, aggregates=aggregates,
                       tuned_alpha=tuned)
