import numpy as np
import pytest

from sltube.controllers import benchmark_problem
from sltube.horizon import LtiSystem, build_horizon_operators

A_BENCH = np.array([[1.0, 0.15], [0.0, 1.0]])
B_BENCH = np.array([[0.5], [0.5]])
X0_BENCH = np.array([-0.9, 0.0])


@pytest.fixture
def bench_sys():
    return LtiSystem(A_BENCH, B_BENCH)


@pytest.fixture
def scalar_ops():
    def make(a=1.0, b=1.0, N=2):
        return build_horizon_operators(LtiSystem([[a]], [[b]]), N)
    return make


@pytest.fixture(scope="session")
def bench_problem():
    return benchmark_problem(0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record(number, passed, text):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
