import numpy as np
import pytest

_ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion and print it right away."""

    def report(number, title, ok, detail=""):
        line = f"acceptance #{number:<2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
