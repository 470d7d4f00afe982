import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from cmunet.engine import Tensor

ACCEPTANCE_RESULTS: list[str] = []


@pytest.fixture(scope="session", autouse=True)
def reference_mode():
    with threadpool_limits(limits=1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
