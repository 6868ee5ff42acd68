import numpy as np
import pytest

# filled by test_acceptance, printed after the run
ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_kernel(rng, o, d, scale=None):
    scale = 1.0 / np.sqrt(d) if scale is None else scale
    return rng.standard_normal((o, d)) * scale


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
