import numpy as np
import pytest

_LINES = []


@pytest.fixture
def report():
    """Record a one-line acceptance verdict, printed in the terminal summary."""

    def _report(label: str, ok: bool, detail: str = ""):
        _LINES.append(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
