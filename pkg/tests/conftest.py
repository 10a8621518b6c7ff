import numpy as np
import pytest

from mtgpk.core import BaseKernelSpec, IcmSpec, TaskCovariance

OMEGA_08 = [[1.0, 0.8], [0.8, 1.0]]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def icm_erf():
    return IcmSpec(BaseKernelSpec("erf", bias_const=0.1), TaskCovariance.from_matrix(OMEGA_08))


def random_task_cov(rng, T):
    A = rng.standard_normal((T, T))
    return TaskCovariance.from_matrix(A @ A.T + 0.1 * np.eye(T))


ACCEPTANCE = []


def record(criterion, ok, detail):
    """Store one acceptance line; the terminal summary prints them all."""
    ACCEPTANCE.append((criterion, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
        terminalreporter.write_line(f"criterion {criterion:>2}: {status}  {detail}")
