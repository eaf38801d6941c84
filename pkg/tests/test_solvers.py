import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invstab.errors import DegenerateRegularizationError, NumericalError, ParameterError
from invstab.linops import LinearOperator, SpectralFilter, finite_difference_matrix, identity_operator, pinv, spectral_reconstruct
from invstab.signals import generate_operator, generate_signal, make_dataset, measure
from invstab.solvers import (
    IdentityDenoiser,
    MovingAverageDenoiser,
    Reconstructor,
    SolverParams,
    TVProxDenoiser,
    default_step_size,
    learned_linear_fit,
    pnp_pgd,
    reconstruct,
    tikhonov,
    tv_admm,
    tv_objective,
)


@pytest.fixture(scope="module")
def mid_problem():
    A = generate_operator(64, 128, 0.0, 0.05, seed=7)
    u = generate_signal(128, jump_count_range=(2, 5), seed=8)
    return A, u, measure(A, u, 0.01, seed=8)


# ---------------------------------------------------------------- Tikhonov


def test_tikhonov_identity_closed_form(rng):
    f = rng.standard_normal(6)
    rec = tikhonov(identity_operator(6), identity_operator(6), f, 0.25)
    assert np.allclose(rec.values, f / 1.25, rtol=1e-14)


def test_tikhonov_small_alpha_is_data_consistent(bench_operator, bench_instance):
    _, meas = bench_instance
    rec = tikhonov(bench_operator, finite_difference_matrix(1024), meas.values, 1e-7)
    assert float(np.sum((bench_operator.entries @ rec.values - meas.values) ** 2)) <= 1e-6


def test_tikhonov_matches_spectral_filter(bench_operator, bench_instance):
    _, meas = bench_instance
    for alpha in (1e-7, 1.0, 1e2):
        a = tikhonov(bench_operator, identity_operator(1024), meas.values, alpha).values
        b = spectral_reconstruct(bench_operator, meas.values, SpectralFilter.tikhonov(alpha))
        assert np.linalg.norm(a - b) <= 1e-8 * np.linalg.norm(b)


def test_tikhonov_certificate_and_residual(small_operator, small_instance):
    _, meas = small_instance
    D = finite_difference_matrix(48)
    rec = tikhonov(small_operator, D, meas.values, 0.3)
    assert np.allclose(rec.subgradient, 0.3 * D.entries.T @ (D.entries @ rec.values), rtol=0, atol=1e-12)
    A = small_operator.entries
    normal = (A.T @ A + 0.3 * D.entries.T @ D.entries) @ rec.values - A.T @ meas.values
    assert np.linalg.norm(normal) <= 1e-8 * np.linalg.norm(A.T @ meas.values)
    assert rec.diagnostics.optimality_residual <= rec.diagnostics.optimality_tolerance


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_tikhonov_is_linear(small_operator, a, b, seed):
    rng = np.random.default_rng(seed)
    f1, f2 = rng.standard_normal(24), rng.standard_normal(24)
    G = Reconstructor("tikhonov", small_operator, SolverParams(alpha=0.1))
    lhs = G(a * f1 + b * f2).values
    rhs = a * G(f1).values + b * G(f2).values
    assert np.linalg.norm(lhs - rhs) <= 1e-9 * max(np.linalg.norm(rhs), 1e-300) + 1e-14


def test_tikhonov_oversmoothing_direction(small_operator, small_instance):
    _, meas = small_instance
    D = finite_difference_matrix(48)
    norms = [np.linalg.norm(D @ tikhonov(small_operator, D, meas.values, a).values)
             for a in np.logspace(-6, 4, 15)]
    assert all(b <= a * (1 + 1e-10) for a, b in zip(norms, norms[1:]))


def test_tikhonov_degenerate_regularization():
    A = LinearOperator(np.array([[1.0, -1.0]]))  # constants lie in null(A) and null(D)
    with pytest.raises(DegenerateRegularizationError) as exc:
        tikhonov(A, finite_difference_matrix(2), np.array([1.0]), 1.0)
    assert exc.value.shared_null_dim == 1


def test_tikhonov_rejects_bad_alpha(small_operator):
    with pytest.raises(ParameterError):
        tikhonov(small_operator, None, np.zeros(24), 0.0)


# ---------------------------------------------------------------- TV-ADMM


def test_tv_recovers_constant_signal(mid_problem):
    A, _, _ = mid_problem
    c = np.full(128, 0.7)
    f = A.entries @ c
    for alpha in (1e-3, 1e-1, 10.0):
        rec = tv_admm(A, f, alpha)
        assert rec.diagnostics.converged
        assert np.max(np.abs(rec.values - c)) <= 1e-6


def test_tv_alpha_zero_is_min_norm_least_squares(mid_problem):
    A, _, meas = mid_problem
    rec = tv_admm(A, meas.values, 0.0)
    assert np.max(np.abs(rec.values - pinv(A) @ meas.values)) <= 1e-6


def test_tv_certificate(mid_problem):
    A, _, meas = mid_problem
    rec = tv_admm(A, meas.values, 0.05)
    assert rec.diagnostics.converged
    p = A.entries.T @ (meas.values - A.entries @ rec.values)
    assert np.linalg.norm(rec.subgradient - p) <= 1e-10 * max(1.0, np.linalg.norm(p))
    cert = rec.diagnostics.certificate
    assert cert["valid"] and cert["multiplier_max_abs"] <= 1.0
    assert rec.diagnostics.optimality_residual >= 0


def test_tv_beats_generic_optimizer_objective(mid_problem):
    """ADMM objective is no worse than a long PnP run with the exact TV prox."""
    A, _, meas = mid_problem
    alpha = 0.05
    rec = tv_admm(A, meas.values, alpha)
    tau = default_step_size(A)
    pnp = pnp_pgd(A, meas.values, TVProxDenoiser(alpha * tau), tau, 20000, np.zeros(128))
    ref = tv_objective(A, meas.values, pnp.values, alpha)
    assert rec.diagnostics.objective <= ref * (1 + 1e-5)


def test_tv_merit_monotone_on_fixed_penalty(mid_problem):
    A, _, meas = mid_problem
    rec = tv_admm(A, meas.values, 0.05)
    merit = rec.diagnostics.merit
    rhos = rec.trace.rhos
    scales = rec.trace.scales
    checked = 0
    for k in range(5, len(merit) - 1):
        if rhos[k - 1] == rhos[k] == rhos[k + 1] and scales[k - 1] == scales[k] == 1.0:
            assert merit[k + 1] <= merit[k] * (1 + 1e-10) + 1e-300
            checked += 1
    assert checked > 10


def test_tv_nonconvergence_is_flagged(mid_problem):
    A, _, meas = mid_problem
    rec = tv_admm(A, meas.values, 0.05, SolverParams(max_iterations=3))
    assert not rec.diagnostics.converged
    assert rec.diagnostics.iterations == 3


def test_tv_nan_raises(mid_problem):
    A, _, meas = mid_problem
    f = meas.values.copy()
    f[0] = np.nan
    with pytest.raises((NumericalError, ParameterError)):
        tv_admm(A, f, 0.05)


def test_tv_frozen_map_reproduces_solve(mid_problem):
    A, _, meas = mid_problem
    G = Reconstructor("tv-admm", A, SolverParams(alpha=0.05))
    rec = G(meas.values)
    frozen = G.freeze(rec)
    assert np.array_equal(frozen(meas.values), rec.values)


def test_tv_with_python_kernels_matches(mid_problem):
    from invstab import kernels

    A, _, meas = mid_problem
    ref = tv_admm(A, meas.values, 0.05)
    previous = kernels.use_backend("python")
    try:
        alt = tv_admm(A, meas.values, 0.05)
    finally:
        kernels.use_backend(previous)
    assert np.max(np.abs(alt.values - ref.values)) <= 1e-9


# ---------------------------------------------------------------- PnP


def test_pnp_identity_reaches_least_squares(small_operator, small_instance):
    _, meas = small_instance
    tau = default_step_size(small_operator)
    rec = pnp_pgd(small_operator, meas.values, IdentityDenoiser(), tau, 5000, np.zeros(48))
    A = small_operator.entries
    assert np.linalg.norm(A.T @ (A @ rec.values - meas.values)) <= 1e-6


def test_pnp_tv_prox_matches_admm_objective(mid_problem):
    A, _, meas = mid_problem
    alpha = 0.05
    admm = tv_admm(A, meas.values, alpha)
    pnp = Reconstructor("pnp-pgd", A, SolverParams(alpha=alpha))(meas.values)
    assert abs(pnp.diagnostics.objective - admm.diagnostics.objective) <= 0.01 * admm.diagnostics.objective


def test_pnp_zero_iterations_returns_start(small_operator):
    u0 = np.linspace(0, 1, 48)
    rec = pnp_pgd(small_operator, np.zeros(24), IdentityDenoiser(), 0.1 * default_step_size(small_operator), 0, u0)
    assert np.array_equal(rec.values, u0)


def test_pnp_step_size_range(small_operator):
    limit = 2 * default_step_size(small_operator)
    with pytest.raises(ParameterError):
        pnp_pgd(small_operator, np.zeros(24), IdentityDenoiser(), limit, 5, np.zeros(48))


def test_pnp_denoiser_shape_contract(small_operator):
    from invstab.errors import ContractError
    from invstab.solvers import Denoiser

    class Bad(Denoiser):
        def __call__(self, x):
            return x[:-1]

    with pytest.raises(ContractError):
        pnp_pgd(small_operator, np.zeros(24), Bad(), default_step_size(small_operator), 2, np.zeros(48))


def test_moving_average_denoiser():
    d = MovingAverageDenoiser(3)
    x = np.array([0.0, 3.0, 0.0, 3.0])
    assert np.allclose(d(x), [1.5, 1.0, 2.0, 1.5])
    with pytest.raises(ParameterError):
        MovingAverageDenoiser(4)


# ---------------------------------------------------------------- learned linear


def test_learned_linear_recovers_inverse():
    rng = np.random.default_rng(3)
    A = LinearOperator(rng.standard_normal((8, 8)) + 4 * np.eye(8))
    pairs = []
    for k in range(16):
        u = rng.standard_normal(8)
        pairs.append((u, A.entries @ u))
    L = learned_linear_fit(pairs, 0.0)
    assert np.max(np.abs(L.matrix - np.linalg.inv(A.entries))) <= 1e-6


def test_learned_linear_single_pair_interpolates(small_operator, small_instance):
    u, meas = small_instance
    L = learned_linear_fit([(u, meas)], 0.0)
    assert np.max(np.abs(L(meas.values) - u.values)) <= 1e-8


def test_learned_linear_ridge_shrinks(small_operator):
    data = make_dataset(small_operator, 30, 48, first_seed=0)
    norms = [np.linalg.norm(learned_linear_fit(data.pairs(), r).matrix) for r in (1e-3, 1e2, 1e6, 1e12)]
    assert norms[-1] < 1e-6 * norms[0]
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_learned_linear_singular_needs_ridge():
    u = np.ones(4)
    f = np.array([1.0, 0.0])
    with pytest.raises(ParameterError, match="ridge"):
        learned_linear_fit([(u, f), (2 * u, 2 * f), (3 * u, 3 * f)], 0.0)


def test_learned_linear_both_forms_agree(small_operator):
    data = make_dataset(small_operator, 40, 48, first_seed=0)
    pairs = data.pairs()
    big = learned_linear_fit(pairs, 0.5).matrix  # K >= m: primal form
    U = np.array([s.values for s, _ in pairs])
    F = np.array([m.values for _, m in pairs])
    gram = U.T @ np.linalg.solve(F @ F.T + 0.5 * np.eye(40), F)
    assert np.allclose(big, gram, atol=1e-10)


# ---------------------------------------------------------------- dispatch


def test_dispatch_matches_direct(small_operator, small_instance):
    _, meas = small_instance
    D = finite_difference_matrix(48)
    a = reconstruct("tikhonov", small_operator, meas.values, SolverParams(alpha=0.2), D=D)
    b = tikhonov(small_operator, D, meas.values, 0.2)
    assert a.values.tobytes() == b.values.tobytes()


def test_dispatch_certificates(small_operator, small_instance):
    u, meas = small_instance
    tv = reconstruct("tv-admm", small_operator, meas.values, SolverParams(alpha=0.05))
    assert tv.subgradient is not None
    L = learned_linear_fit([(u, meas)], 1e-3)
    ll = reconstruct("learned-linear", small_operator, meas.values, learned=L)
    assert ll.subgradient is None


def test_dispatch_unknown_solver(small_operator):
    with pytest.raises(ParameterError):
        reconstruct("unet", small_operator, np.zeros(24))


@pytest.mark.parametrize("field,value", [("alpha", 0.0), ("admm_penalty", -1.0), ("primal_tolerance", 1.5),
                                         ("max_iterations", 0), ("pnp_iterations", 2.5)])
def test_solver_params_validation(field, value):
    with pytest.raises(ParameterError):
        SolverParams(**{field: value}).validate()


def test_reconstruction_sidecar(small_operator, small_instance):
    _, meas = small_instance
    rec = reconstruct("tv-admm", small_operator, meas.values, SolverParams(alpha=0.05))
    side = rec.sidecar()
    assert side["solver_id"] == "tv-admm" and side["alpha"] == 0.05
    assert "iterations" in side["diagnostics"]
