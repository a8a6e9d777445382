import numpy as np
import pytest

from dmrivae.acquisition import DEFAULT_SIM_BVALUES, fibonacci_shell, scheme_for_simulation


@pytest.fixture
def sim_scheme():
    return scheme_for_simulation(DEFAULT_SIM_BVALUES)


@pytest.fixture
def small_scheme():
    # keeps MSDKI exponents moderate for finite-difference checks
    return scheme_for_simulation([0.0, 0.25, 0.5, 0.75, 1.0])


@pytest.fixture
def shell30():
    return fibonacci_shell(30, bvalue=1.0)


def central_difference(f, x, h=1e-5):
    """Central finite differences of a vector function, one column per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
