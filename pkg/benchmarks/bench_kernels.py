"""Time the compiled kernels against their pure-Python fallbacks.

Usage::

    python benchmarks/bench_kernels.py [--n 1024] [--repeat 5]

Also times one full TV-ADMM solve on the default 512 x 1024 problem with
each backend, since the kernels sit inside that loop.
"""

import argparse
import timeit

import numpy as np

from invstab import _fallback, kernels
from invstab.signals import generate_operator, generate_signal, measure
from invstab.solvers import tv_admm


def _time(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_table(n, repeat):
    if "compiled" not in kernels.available_backends():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    from invstab import _kernels

    rng = np.random.default_rng(0)
    y = np.cumsum(rng.standard_normal(n))
    v = rng.standard_normal(n - 1)
    rows = []
    for name, call in (
        ("tv_prox", lambda mod: mod.tv_prox(y, 0.5)),
        ("soft_threshold", lambda mod: mod.soft_threshold(v, 0.3)),
        ("admm_shrink_step", lambda mod: mod.admm_shrink_step(
            v, np.zeros(n - 1), np.zeros(n - 1), 0.3, np.zeros(n - 1, dtype=np.uint8), 1.8)),
    ):
        number = 200
        t_c = _time(lambda: call(_kernels), repeat, number)
        t_p = _time(lambda: call(_fallback), repeat, number)
        rows.append((name, t_c, t_p))
    return rows


def solve_table(repeat):
    A = generate_operator(512, 1024, 0.0, 0.05, seed=1)
    u = generate_signal(1024, seed=3)
    f = measure(A, u, 0.03, seed=3).values
    tv_admm(A, f, 0.6)  # warm the factorization caches
    out = []
    for backend in ("compiled", "python"):
        previous = kernels.use_backend(backend)
        try:
            out.append((backend, _time(lambda: tv_admm(A, f, 0.6), max(1, repeat // 2), 1)))
        finally:
            kernels.use_backend(previous)
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=1024, help="signal length for the kernel timings")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    print(f"{'kernel':<18}{'compiled [us]':>15}{'python [us]':>15}{'speedup':>10}")
    for name, t_c, t_p in kernel_table(args.n, args.repeat):
        print(f"{name:<18}{t_c * 1e6:>15.1f}{t_p * 1e6:>15.1f}{t_p / t_c:>10.1f}")
    print()
    print(f"{'TV-ADMM solve':<18}{'seconds':>15}")
    for backend, t in solve_table(args.repeat):
        print(f"{backend:<18}{t:>15.3f}")


if __name__ == "__main__":
    main()
