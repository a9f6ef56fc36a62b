import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spadofdm.spad import SpadArrayConfig

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES = {}


@pytest.fixture
def spad():
    return SpadArrayConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion."""

    def _record(key, ok, detail):
        line = f"{key}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES[key] = line
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
