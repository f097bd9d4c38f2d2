import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("rowgraph", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("rowgraph")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def report(criterion, passed, detail):
    """Record one acceptance line; all lines are repeated in the terminal summary."""
    line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: s.split(":")[0]):
            terminalreporter.write_line(line)
