import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_jvp(f, x, v, h=1e-6):
    """Central difference of ``f`` at ``x`` along ``v``."""
    return (f(x + h * v) - f(x - h * v)) / (2 * h)


_verdicts = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_verdicts] = []


@pytest.fixture
def verdict(request):
    """``verdict(label, ok, detail)`` records one acceptance line; the lines
    are repeated in the terminal summary."""
    lines = request.config.stash[_verdicts]

    def record(label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} {label}" + (f": {detail}" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_verdicts, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
