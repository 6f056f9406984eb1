import numpy as np
import pytest

from compseg.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def f64(arr, grad=True, name=None):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad, dtype=np.float64, name=name)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
