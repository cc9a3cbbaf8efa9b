import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def report():
    """Collects one summary line per acceptance criterion."""
    return ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def rel_err(actual, expected):
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(np.max(np.abs(expected), initial=0.0), 1e-300)
    return np.max(np.abs(np.asarray(actual, dtype=np.float64) - expected), initial=0.0) / scale
