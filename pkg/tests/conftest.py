import numpy as np
import pytest

from sparseswin import Tensor, build, tiny_config
from sparseswin.rng import Rng

# Acceptance results recorded by tests/test_acceptance.py, echoed in the summary.
ACCEPTANCE_LINES: list[str] = []


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def randn(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


@pytest.fixture
def tiny_model():
    return build(tiny_config(), Rng(0))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
