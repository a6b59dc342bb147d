import numpy as np
import pytest

from dfakd import tensor as T


@pytest.fixture(autouse=True)
def _fp64():
    """Every test starts in fp64 reference mode."""
    T.set_precision("fp64")
    yield
    T.set_precision("fp64")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
