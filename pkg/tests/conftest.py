import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

AC_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def ac_report():
    """Record one pass/fail line per acceptance criterion."""
    def report(name, passed, detail):
        line = f"{name} {'PASS' if passed else 'FAIL'}: {detail}"
        AC_LINES.append(line)
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if AC_LINES:
        terminalreporter.section("acceptance criteria")
        for line in AC_LINES:
            terminalreporter.write_line(line)
