import math
from fractions import Fraction
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invstab.errors import DegenerateOperatorError, FilterDomainError, ParameterError
from invstab.linops import (
    LinearOperator,
    SpectralFilter,
    condition_number,
    data_consistency_project,
    finite_difference_matrix,
    fit_spectral_filter,
    identity_operator,
    pinv,
    spectral_reconstruct,
    svd,
)
from invstab.signals import generate_operator, generate_signal, make_dataset, measure
from invstab.solvers import tikhonov
from oracles import jacobi_singular_values


def square_operator(n, seed=0):
    rng = np.random.default_rng(seed)
    return LinearOperator(rng.standard_normal((n, n)) + 3 * np.eye(n))


def test_jacobi_oracle_sanity():
    M = np.diag([3.0, 1.0, 0.5])
    assert np.allclose(jacobi_singular_values(M), [3, 1, 0.5])


def test_svd_identity_and_diagonal():
    assert np.allclose(svd(identity_operator(4)).singular_values, 1.0)
    fac = svd(LinearOperator(np.diag([3.0, 1.0])))
    assert np.allclose(fac.singular_values, [3.0, 1.0])


def test_svd_reconstructs_default_operator(bench_operator):
    fac = svd(bench_operator)
    R = (fac.U * fac.singular_values) @ fac.V.T
    err = np.linalg.norm(R - bench_operator.entries) / np.linalg.norm(bench_operator.entries)
    assert err <= 1e-10
    assert np.all(np.diff(fac.singular_values) <= 0) and np.all(fac.singular_values >= 0)
    assert svd(bench_operator) is fac


def test_svd_cache_computes_once_under_concurrency():
    A = generate_operator(60, 80, 0, 0.05, seed=2)
    results = []
    threads = [threading.Thread(target=lambda: results.append(svd(A))) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(r is results[0] for r in results)


def test_condition_number_trivial():
    assert condition_number(identity_operator(5)) == 1.0
    assert math.isclose(condition_number(LinearOperator(np.diag([10.0, 0.1]))), 100.0, rel_tol=1e-12)


def test_condition_number_zero_operator():
    with pytest.raises(DegenerateOperatorError):
        condition_number(LinearOperator(np.zeros((3, 3))))


def test_condition_number_matches_jacobi_oracle(bench_operator):
    sub = LinearOperator(bench_operator.entries[:16, :32])
    sv = jacobi_singular_values(sub.entries)
    assert abs(condition_number(sub) - sv[0] / sv[-1]) <= 1e-8 * (sv[0] / sv[-1])


@settings(max_examples=20, deadline=None)
@given(c=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
def test_condition_number_scale_invariant(c, seed):
    A = generate_operator(6, 9, 0, 1.0, seed=seed)
    assert math.isclose(condition_number(LinearOperator(c * A.entries)), condition_number(A), rel_tol=1e-10)


def test_spectral_truncated_is_inverse_for_square():
    A = square_operator(12, seed=3)
    f = np.arange(12.0)
    out = spectral_reconstruct(A, f, SpectralFilter.truncated(0.0))
    assert np.allclose(out, np.linalg.solve(A.entries, f), rtol=0, atol=1e-8 * np.abs(out).max())


def test_spectral_tikhonov_matches_solver(small_operator, small_instance):
    _, meas = small_instance
    for alpha in (1e-3, 0.5, 10.0):
        a = spectral_reconstruct(small_operator, meas.values, SpectralFilter.tikhonov(alpha))
        b = tikhonov(small_operator, identity_operator(48), meas.values, alpha).values
        assert np.linalg.norm(a - b) <= 1e-8 * np.linalg.norm(b)


def test_spectral_zero_and_linearity(small_operator, rng):
    flt = SpectralFilter.tikhonov(0.1)
    assert np.all(spectral_reconstruct(small_operator, np.zeros(24), flt) == 0)
    f1, f2 = rng.standard_normal(24), rng.standard_normal(24)
    lhs = spectral_reconstruct(small_operator, 2 * f1 - 3 * f2, flt)
    rhs = 2 * spectral_reconstruct(small_operator, f1, flt) - 3 * spectral_reconstruct(small_operator, f2, flt)
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(rhs)


def test_filter_domain_errors(small_operator):
    table = SpectralFilter("custom-table", (0.0, 1.0, 0.1, 2.0))
    with pytest.raises(FilterDomainError):
        spectral_reconstruct(small_operator, np.ones(24), table)
    with pytest.raises(FilterDomainError):
        spectral_reconstruct(small_operator, np.ones(24), SpectralFilter.per_index([1.0, 2.0]))
    with pytest.raises(ParameterError):
        SpectralFilter("tikhonov-filter", (0.0,))
    with pytest.raises(ParameterError):
        SpectralFilter("bogus", ())


def test_filter_json_roundtrip():
    flt = SpectralFilter.per_index([0.5, 0.25])
    assert SpectralFilter.from_json(flt.to_json()) == flt


def test_fit_filter_noiseless_is_inverse():
    A = square_operator(10, seed=4)
    data = make_dataset(A, 30, 10, first_seed=0, noise_std=0.0, jump_count_range=(1, 5))
    flt = fit_spectral_filter(data.pairs(), A)
    sv = svd(A).singular_values
    assert np.allclose(np.array(flt.parameters), 1 / sv, rtol=0, atol=1e-6)


def test_fit_filter_zero_signals(small_operator):
    pairs = [(np.zeros(48), measure(small_operator, generate_signal(48, (0, 0), (0, 0), seed=s), 0.1, s))
             for s in range(5)]
    flt = fit_spectral_filter(pairs, small_operator)
    assert np.all(np.array(flt.parameters) == 0)


def _grid_minimize(fn, lo, hi, levels=16, points=41):
    """Zooming grid search; ``fn`` is evaluated in exact rational arithmetic."""
    lo, hi = Fraction(lo), Fraction(hi)
    for _ in range(levels):
        step = (hi - lo) / (points - 1)
        xs = [lo + k * step for k in range(points)]
        best = min(xs, key=fn)
        lo, hi = best - 2 * step, best + 2 * step
    return float(best)


def test_fit_filter_matches_scalar_grid_oracle(rng):
    A = generate_operator(6, 8, 0, 1.0, seed=21)
    fac = svd(A)
    pairs = []
    for k in range(40):
        u = rng.standard_normal(8) * np.array([3, 2, 1, 1, 0.5, 0.5, 0.2, 0.1])
        pairs.append((u, A.entries @ u + 0.3 * rng.standard_normal(6)))
    flt = fit_spectral_filter(pairs, A)
    for i in range(fac.rank):
        c = np.array([f @ fac.U[:, i] for _, f in pairs])
        t = np.array([u @ fac.V[:, i] for u, _ in pairs])
        cq, tq = [Fraction(x) for x in c], [Fraction(x) for x in t]
        g = _grid_minimize(lambda x: sum((x * a - b) ** 2 for a, b in zip(cq, tq)), -10, 10)
        assert abs(flt.parameters[i] - g) <= 1e-8


def test_fit_filter_empty():
    with pytest.raises(ParameterError):
        fit_spectral_filter([], identity_operator(3))


def test_finite_differences():
    D = finite_difference_matrix(3)
    assert D.shape == (2, 3)
    assert np.array_equal(D @ np.array([5.0, 5.0, 5.0]), [0.0, 0.0])
    assert np.array_equal(D @ np.array([0.0, 1.0, 3.0]), [1.0, 2.0])
    with pytest.raises(ParameterError):
        finite_difference_matrix(1)


def test_fd_l1_equals_signal_tv():
    for seed in range(5):
        s = generate_signal(300, seed=seed)
        assert math.isclose(float(np.abs(finite_difference_matrix(300) @ s.values).sum()), s.total_variation(),
                            rel_tol=1e-12)


def test_projection_range_and_idempotence(small_operator, rng):
    u0, u = rng.standard_normal(48), rng.standard_normal(48)
    f = small_operator.entries @ u0
    out = data_consistency_project(small_operator, f, u)
    assert np.linalg.norm(small_operator.entries @ out - f) <= 1e-8 * max(1, np.linalg.norm(f))
    again = data_consistency_project(small_operator, f, out)
    assert np.linalg.norm(again - out) <= 1e-10 * np.linalg.norm(out)


def test_projection_identity_operator(rng):
    f, u = rng.standard_normal(7), rng.standard_normal(7)
    assert np.allclose(data_consistency_project(identity_operator(7), f, u), f, atol=1e-14)


def test_projection_against_null_space_basis(rng):
    A = generate_operator(5, 9, 0, 1.0, seed=13)
    _, s, Vt = np.linalg.svd(A.entries)
    N = Vt[5:].T  # explicit null-space basis
    f, u = rng.standard_normal(5), rng.standard_normal(9)
    brute = np.linalg.lstsq(A.entries, f, rcond=None)[0] + N @ (N.T @ u)
    out = data_consistency_project(A, f, u)
    assert np.allclose(out, brute, atol=1e-10)
    # linear part I - A^+ A is an orthogonal projector
    P = np.eye(9) - pinv(A) @ A.entries
    assert np.linalg.norm(P, 2) <= 1 + 1e-12


def test_operator_entries_are_read_only(small_operator):
    with pytest.raises(ValueError):
        small_operator.entries[0, 0] = 1.0
