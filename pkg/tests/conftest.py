import numpy as np
import pytest

# One line per acceptance criterion, printed at the end of the session.
ACCEPTANCE_LINES: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
