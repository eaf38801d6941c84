import numpy as np
import pytest

from invstab.signals import generate_operator, generate_signal, measure


@pytest.fixture(scope="session")
def bench_operator():
    """The default 512 x 1024 Gaussian operator."""
    return generate_operator(512, 1024, 0.0, 0.05, seed=1)


@pytest.fixture(scope="session")
def bench_instance(bench_operator):
    u = generate_signal(1024, seed=3)
    return u, measure(bench_operator, u, 0.03, seed=3)


@pytest.fixture(scope="session")
def small_operator():
    return generate_operator(24, 48, 0.0, 0.05, seed=5)


@pytest.fixture(scope="session")
def small_instance(small_operator):
    u = generate_signal(48, jump_count_range=(2, 4), seed=11)
    return u, measure(small_operator, u, 0.01, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    store = request.config.stash[_ACCEPTANCE]

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        store[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for number in sorted(store):
            terminalreporter.write_line(store[number])
