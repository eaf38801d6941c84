"""Command-line interface.

Exit codes: 0 success, 1 validation error, 2 compute error, 3 IO error.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from invstab import io
from invstab.errors import InvstabError, ParameterError

EXIT_OK, EXIT_VALIDATION, EXIT_COMPUTE, EXIT_IO = 0, 1, 2, 3


def _add_global(parser, sub=False):
    # on subcommands the flags must not overwrite values given before the subcommand
    kw = {"default": argparse.SUPPRESS} if sub else {}
    parser.add_argument("--config", help="YAML benchmark config (defaults reproduce the standard protocol)", **kw)
    parser.add_argument("--seed", type=int, help="base seed; every stream seed is derived from it", **kw)
    parser.add_argument("--out", help="output directory", **kw)
    parser.add_argument("--workers", type=int, help="worker threads (default: available CPUs)", **kw)
    parser.add_argument("--format", choices=("csv", "json"), action="append", dest="formats",
                        help="report format; repeat for several (default: both)", **kw)


def _add_instance(parser):
    parser.add_argument("--dataset", help="dataset directory written by 'generate'")
    parser.add_argument("--index", type=int, default=0, help="instance index within the dataset or test set")


def _add_solver(parser, name="--solver"):
    from invstab.solvers import SOLVER_IDS, SolverParams

    defaults = SolverParams()
    parser.add_argument(name, default="tikhonov", choices=SOLVER_IDS)
    parser.add_argument("--alpha", type=float, default=defaults.alpha)
    parser.add_argument("--admm-penalty", type=float, default=defaults.admm_penalty)
    parser.add_argument("--admm-relaxation", type=float, default=defaults.admm_relaxation)
    parser.add_argument("--max-iterations", type=int, default=defaults.max_iterations)
    parser.add_argument("--primal-tolerance", type=float, default=defaults.primal_tolerance)
    parser.add_argument("--dual-tolerance", type=float, default=defaults.dual_tolerance)
    parser.add_argument("--absolute-tolerance", type=float, default=defaults.absolute_tolerance)
    parser.add_argument("--no-residual-balancing", action="store_true")
    parser.add_argument("--balance-ratio", type=float, default=defaults.balance_ratio)
    parser.add_argument("--balance-factor", type=float, default=defaults.balance_factor)
    parser.add_argument("--step-size", type=float, default=None, help="PnP step tau (default 1/sigma_max^2)")
    parser.add_argument("--pnp-iterations", type=int, default=defaults.pnp_iterations)
    parser.add_argument("--denoiser", default=defaults.denoiser, choices=("tv", "identity", "moving-average"))
    parser.add_argument("--denoiser-width", type=int, default=defaults.denoiser_width)
    parser.add_argument("--pnp-init-alpha", type=float, default=defaults.pnp_init_alpha,
                        help="Tikhonov alpha of the PnP starting point")
    parser.add_argument("--spectral-filter", help="SpectralFilter JSON file for the spectral solver "
                        "(default: Tikhonov filter with --alpha)")
    parser.add_argument("--ridge", type=float, default=1e-3, help="learned-linear ridge")
    parser.add_argument("--train", type=int, default=None, help="learned-linear training pairs")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="invstab", description=__doc__.splitlines()[0])
    _add_global(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a dataset directory")
    _add_global(p, sub=True)
    p.add_argument("--count", type=int, default=None, help="instances (default: test-set size)")
    p.add_argument("--split", choices=("test", "validation", "train"), default="test")
    p.add_argument("--csv", action="store_true", help="also write CSV copies of the arrays")

    p = sub.add_parser("reconstruct", help="reconstruct one instance")
    _add_global(p, sub=True)
    _add_instance(p)
    _add_solver(p)

    p = sub.add_parser("attack", help="attack one solver on one instance")
    _add_global(p, sub=True)
    _add_instance(p)
    _add_solver(p)
    p.add_argument("--method", choices=("fgsm", "pgd"), default="fgsm")
    p.add_argument("--objective", choices=("deviation-from-ground-truth", "deviation-from-clean"),
                   default="deviation-from-ground-truth")
    p.add_argument("--backend", default="auto",
                   choices=("auto", "closed-form", "unrolled-adjoint", "finite-difference"))
    p.add_argument("--epsilon", type=float, default=0.2)
    p.add_argument("--attack-step-size", type=float, default=None, help="PGD step (default epsilon/4)")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--grad-check", type=int, default=0, help="coordinates to check against finite differences")

    p = sub.add_parser("verify-bound", help="check the stability bound on test instances")
    _add_global(p, sub=True)
    _add_instance(p)
    _add_solver(p)
    p.add_argument("--count", type=int, default=1, help="instances starting at --index")
    p.add_argument("--perturbation", choices=("adversarial", "gaussian"), default="adversarial")
    p.add_argument("--epsilon", type=float, default=0.2)
    p.add_argument("--cross-alpha", type=float, default=None,
                   help="evaluate Tikhonov(alpha) bound quantities on the solver's pairs")
    p.add_argument("--abs-tol", type=float, default=1e-6)
    p.add_argument("--rel-tol", type=float, default=1e-8)

    p = sub.add_parser("grid-search", help="tune alpha on the validation set")
    _add_global(p, sub=True)
    p.add_argument("--solver", default=None)
    p.add_argument("--low", type=float, default=None)
    p.add_argument("--high", type=float, default=None)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--validation", type=int, default=None, help="validation instances")

    p = sub.add_parser("run", help="run the full benchmark")
    _add_global(p, sub=True)
    p.add_argument("--test", type=int, default=None, help="test instances")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("report", help="regenerate summary and tables from a finished run")
    _add_global(p, sub=True)
    p.add_argument("--from", dest="source", help="run directory (default: --out)")
    return parser


def _load(args):
    from invstab.bench.config import load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seeds.base = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.out is not None:
        cfg.output = args.out
    if args.formats:
        cfg.formats = tuple(dict.fromkeys(args.formats))
    return cfg.validate()


def _operator(cfg):
    from invstab.signals import generate_operator

    return generate_operator(cfg.m, cfg.n, cfg.operator.mean, cfg.operator.variance,
                             cfg.seeds.effective("operator"))


def _dataset(cfg, split, count, A=None):
    from invstab.signals import make_dataset

    A = A if A is not None else _operator(cfg)
    return make_dataset(A, count, cfg.n, cfg.seeds.effective(split), cfg.noise_std,
                        cfg.signal.jump_count_range, cfg.signal.height_range)


def _instances(args, cfg, count=1):
    """``(A, [(signal, measurement), ...])`` from --dataset or the config's test split."""
    if args.dataset:
        from invstab.signals import load_dataset

        data = load_dataset(args.dataset)
        pairs = data.pairs()[args.index:args.index + count]
        if len(pairs) < count:
            raise ParameterError(f"dataset has {len(data)} instances; index {args.index} + {count} is out of range")
        return data.operator, pairs
    if args.index < 0:
        raise ParameterError("--index must be nonnegative")
    data = _dataset(cfg, "test", args.index + count)
    return data.operator, data.pairs()[args.index:]


def _filter(path):
    if path is None:
        return None
    from invstab.linops import SpectralFilter

    return SpectralFilter.from_json(Path(path).read_text())


def _reconstructor(args, cfg, A):
    from invstab.linops import finite_difference_matrix
    from invstab.solvers import Reconstructor, SolverParams, learned_linear_fit

    params = SolverParams(
        alpha=args.alpha,
        admm_penalty=args.admm_penalty,
        admm_relaxation=args.admm_relaxation,
        max_iterations=args.max_iterations,
        primal_tolerance=args.primal_tolerance,
        dual_tolerance=args.dual_tolerance,
        absolute_tolerance=args.absolute_tolerance,
        residual_balancing=not args.no_residual_balancing,
        balance_ratio=args.balance_ratio,
        balance_factor=args.balance_factor,
        step_size=args.step_size,
        pnp_iterations=args.pnp_iterations,
        denoiser=args.denoiser,
        denoiser_width=args.denoiser_width,
        pnp_init_alpha=args.pnp_init_alpha,
        spectral_filter=_filter(args.spectral_filter),
    )
    learned = None
    if args.solver == "learned-linear":
        count = args.train if args.train is not None else cfg.datasets.train
        learned = learned_linear_fit(_dataset(cfg, "train", count, A).pairs(), args.ridge)
    D = finite_difference_matrix(A.cols) if args.solver == "tikhonov" else None
    return Reconstructor(args.solver, A, params, D=D, learned=learned)


def _out(cfg):
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args, cfg):
    from invstab.signals import save_dataset

    count = args.count if args.count is not None else getattr(cfg.datasets, args.split)
    data = _dataset(cfg, args.split, count)
    path = save_dataset(data, _out(cfg), csv=args.csv)
    print(f"wrote {len(data)} instances to {path}")


def cmd_reconstruct(args, cfg):
    A, [(sig, meas)] = _instances(args, cfg)
    G = _reconstructor(args, cfg, A)
    rec = G(meas.values)
    out = _out(cfg)
    io.write_array(out / "reconstruction.invr", rec.values)
    sidecar = rec.sidecar()
    sidecar["error_sq"] = float(np.sum((rec.values - sig.values) ** 2))
    io.dump_json(out / "reconstruction.json", sidecar)
    print(f"{rec.solver_id}: ||u_hat-u_gt||^2 = {sidecar['error_sq']:.6g}, "
          f"iterations = {rec.diagnostics.iterations}, converged = {rec.diagnostics.converged}")


def cmd_attack(args, cfg):
    from invstab.attacks import AttackConfig, make_attacker, save_attack_result

    A, [(sig, meas)] = _instances(args, cfg)
    G = _reconstructor(args, cfg, A)
    acfg = AttackConfig(
        epsilon=args.epsilon, step_size=args.attack_step_size, steps=args.steps, restarts=args.restarts,
        objective=args.objective, gradient_backend=args.backend, seed=cfg.seeds.effective("attack"),
        grad_check_coords=args.grad_check,
    )
    res = make_attacker(args.method)(G, A, meas.values, sig.values, acfg)
    save_attack_result(res, _out(cfg))
    print(f"{args.method} on {G.solver_id}: objective = {res.objective_value:.6g}, "
          f"||A u_adv - f_adv||^2 = {res.measurement_consistency:.6g}, backend = {res.backend_used}")
    if res.grad_check:
        print(f"grad check: max relative error {res.grad_check['max_relative_error']:.3g}")


def cmd_verify_bound(args, cfg):
    import warnings

    from invstab.attacks import AttackConfig, fgsm
    from invstab.bench.runner import STABILITY_COLUMNS, _stability_record, _write_records_csv
    from invstab.signals import rng_for
    from invstab.stability import TolerancePolicy, verify_stability_bound, write_scatter

    A, pairs = _instances(args, cfg, args.count)
    G = _reconstructor(args, cfg, A)
    if not G.variational and args.cross_alpha is None:
        raise ParameterError(f"{args.solver} has no certificate; pass --cross-alpha to evaluate Tikhonov quantities")
    policy = TolerancePolicy(args.abs_tol, args.rel_tol)
    records, reports = [], []
    for offset, (sig, meas) in enumerate(pairs):
        idx = args.index + offset
        f = meas.values
        clean = G(f)
        atk = fgsm(G, A, f, sig.values, AttackConfig(epsilon=args.epsilon, seed=cfg.seeds.effective("attack") + idx),
                   clean=clean)
        if args.perturbation == "adversarial":
            f2 = atk.f_adv
        else:
            g = rng_for(cfg.seeds.effective("perturbation"), 0x6A550000 + idx).standard_normal(A.rows)
            f2 = f + g * (np.linalg.norm(atk.delta) / np.linalg.norm(g))
        r2 = G(f2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            kw = {"regularizer": "tikhonov", "alpha": args.cross_alpha} if args.cross_alpha is not None else {}
            rep = verify_stability_bound(A, f, f2, clean, r2, policy, **kw)
        reports.append(rep)
        records.append(_stability_record(args.solver, idx, args.perturbation, rep,
                                         clean.diagnostics.converged and r2.diagnostics.converged))
    out = _out(cfg)
    if "csv" in cfg.formats:
        _write_records_csv(out / "stability.csv", records, STABILITY_COLUMNS)
    if "json" in cfg.formats:
        io.dump_json(out / "stability.json", {"pairs": records})
    write_scatter(out / "scatter.dat", reports)
    write_scatter(out / "scatter_worst.dat", reports, args.epsilon, A.rows)
    violations = sum(r.violated for r in reports)
    print(f"{len(reports)} pairs, {violations} violations")


def cmd_grid_search(args, cfg):
    from invstab.bench.runner import GRID_COLUMNS, _write_records_csv, grid_search_alpha

    grid = dataclasses.replace(cfg.grid, **{k: v for k, v in
                                            (("solver", args.solver), ("low", args.low),
                                             ("high", args.high), ("points", args.points)) if v is not None})
    count = args.validation if args.validation is not None else cfg.datasets.validation
    val = _dataset(cfg, "validation", count)
    res = grid_search_alpha(grid.solver, grid.values(), val, val.operator, workers=cfg.workers)
    out = _out(cfg)
    table = [{"alpha": r["alpha"], "score": r["score"], "failures": len(r["failures"])} for r in res.table]
    if "csv" in cfg.formats:
        _write_records_csv(out / "grid_search.csv", table, GRID_COLUMNS)
    if "json" in cfg.formats:
        io.dump_json(out / "grid_search.json", res.to_dict())
    print(f"chosen alpha = {res.alpha!r}")


def cmd_run(args, cfg):
    from invstab.bench.runner import run_benchmark

    if args.test is not None:
        cfg.datasets.test = args.test
        cfg.validate()
    say = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    result = run_benchmark(cfg, progress=say)
    print(f"wrote {len(result.artifacts)} artifacts to {cfg.output}")


def cmd_report(args, cfg):
    from invstab.bench.runner import rewrite_report

    src = args.source or cfg.output
    files = rewrite_report(src, cfg.formats)
    print(f"rewrote {len(files)} files in {src}")


COMMANDS = {
    "generate": cmd_generate,
    "reconstruct": cmd_reconstruct,
    "attack": cmd_attack,
    "verify-bound": cmd_verify_bound,
    "grid-search": cmd_grid_search,
    "run": cmd_run,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load(args)
        COMMANDS[args.command](args, cfg)
    except InvstabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
