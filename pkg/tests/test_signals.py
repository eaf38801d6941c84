import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invstab.errors import ParameterError
from invstab.linops import condition_number, finite_difference_matrix, identity_operator
from invstab.signals import (
    expected_noise_norms,
    generate_operator,
    generate_signal,
    load_dataset,
    make_dataset,
    measure,
    save_dataset,
    total_variation,
)


def test_zero_jumps_gives_constant_signal():
    s = generate_signal(8, jump_count_range=(0, 0), seed=7)
    assert s.jumps == ()
    assert np.all(s.values == s.values[0])


def test_signal_is_deterministic():
    a = generate_signal(8, (0, 0), seed=7)
    b = generate_signal(8, (0, 0), seed=7)
    assert np.array_equal(a.values, b.values)
    c, d = generate_signal(1024, seed=99), generate_signal(1024, seed=99)
    assert c.values.tobytes() == d.values.tobytes()


def test_default_signal_tv_matches_direct_sum():
    s = generate_signal(1024, seed=0)
    assert 1 <= len(s.jumps) <= 10
    direct = 0.0
    for i in range(1, s.n):
        direct += abs(s.values[i] - s.values[i - 1])
    assert math.isclose(s.total_variation(), direct, rel_tol=1e-12)
    assert s.total_variation() == s.jump_height_sum()


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(2, 200),
    k=st.integers(0, 12),
    seed=st.integers(0, 2**32),
    lo=st.floats(-5, 0, allow_nan=False),
    width=st.floats(0.1, 5),
)
def test_signal_structure_invariants(n, k, seed, lo, width):
    k = min(k, n - 1)
    s = generate_signal(n, (0, k), (lo, lo + width), seed)
    changes = np.flatnonzero(np.diff(s.values) != 0) + 1
    assert len(s.jumps) == len(changes)
    assert [j for j, _ in s.jumps] == changes.tolist()
    # constant between jumps
    bounds = [0] + changes.tolist() + [n]
    for a, b in zip(bounds[:-1], bounds[1:]):
        assert np.all(s.values[a:b] == s.values[a])
    assert total_variation(s.values) == s.jump_height_sum()
    assert math.isclose(float(np.abs(finite_difference_matrix(n).entries @ s.values).sum()),
                        s.total_variation(), rel_tol=1e-12, abs_tol=1e-12)


@pytest.mark.parametrize("kwargs", [
    {"n": 1},
    {"n": 8, "jump_count_range": (3, 1)},
    {"n": 8, "jump_count_range": (0, 8)},
    {"n": 8, "height_range": (1.0, -1.0)},
    {"n": 8, "jump_count_range": (-1, 2)},
])
def test_signal_rejects_bad_ranges(kwargs):
    with pytest.raises(ParameterError):
        generate_signal(**kwargs)


def test_point_height_range():
    s = generate_signal(50, (3, 3), (0.5, 0.5), seed=1)
    assert [h for _, h in s.jumps] == [0.5, 0.5, 0.5]


def test_normalize_sets_peak():
    s = generate_signal(256, seed=4, normalize=3.0)
    assert math.isclose(np.max(np.abs(s.values)), 3.0, rel_tol=1e-12)


def test_operator_frobenius_law_of_large_numbers():
    A = generate_operator(512, 1024, 0.0, 0.05, seed=1)
    fro = float(np.sum(A.entries ** 2))
    assert abs(fro - 26214.4) <= 0.05 * 26214.4
    assert A.generation["variance"] == 0.05 and A.generation["seed"] == 1


def test_operator_determinism_and_condition():
    a, b = generate_operator(4, 4, 0, 0.05, seed=3), generate_operator(4, 4, 0, 0.05, seed=3)
    assert np.array_equal(a.entries, b.entries)
    assert condition_number(generate_operator(2, 2, 0, 1.0, seed=8)) >= 1


@pytest.mark.parametrize("args", [(0, 4, 0, 1), (4, 0, 0, 1), (4, 4, 0, 0.0), (4, 4, 0, -1.0)])
def test_operator_rejects_bad_arguments(args):
    m, n, mean, var = args
    with pytest.raises(ParameterError):
        generate_operator(m, n, mean, var, seed=0)


def test_noiseless_measurement_is_exact(small_operator):
    u = generate_signal(48, seed=2)
    meas = measure(small_operator, u, 0.0, seed=2)
    assert np.array_equal(meas.values, small_operator.entries @ u.values)
    assert np.all(meas.noise == 0)


def test_identity_measurement():
    u = generate_signal(16, seed=5)
    meas = measure(identity_operator(16), u, 0.0, seed=1)
    assert np.array_equal(meas.values, u.values)


def test_measurement_components_are_exact(small_operator):
    u = generate_signal(48, seed=2)
    meas = measure(small_operator, u, 0.5, seed=9)
    assert np.array_equal(meas.values - meas.clean, meas.noise)
    again = measure(small_operator, u, 0.5, seed=9)
    assert meas.values.tobytes() == again.values.tobytes()


def test_measure_dimension_mismatch(small_operator):
    with pytest.raises(ParameterError):
        measure(small_operator, generate_signal(10, seed=0), 0.1, seed=0)


def test_noise_norm_monte_carlo():
    A = identity_operator(512)
    u = generate_signal(512, (0, 0), seed=0)
    norms = [np.linalg.norm(measure(A, u, 0.03, seed=s).noise) for s in range(1000)]
    mean_norm, mean_sq = expected_noise_norms(512, 0.03)
    assert abs(np.mean(norms) - 0.03 * math.sqrt(512)) <= 0.02 * 0.679
    assert abs(mean_norm - 0.679) < 1e-3
    assert math.isclose(mean_sq, 0.4608)


def test_dataset_roundtrip(tmp_path, small_operator):
    data = make_dataset(small_operator, 3, 48, first_seed=5, noise_std=0.02)
    save_dataset(data, tmp_path / "ds", csv=True)
    back = load_dataset(tmp_path / "ds")
    assert len(back) == 3
    assert np.array_equal(back.operator.entries, small_operator.entries)
    for a, b in zip(data.pairs(), back.pairs()):
        assert np.array_equal(a[0].values, b[0].values)
        assert a[0].jumps == b[0].jumps
        assert np.array_equal(a[1].values, b[1].values)
        assert np.array_equal(b[1].values - b[1].clean, b[1].noise)
    assert (tmp_path / "ds" / "signals.csv").exists()
