import numpy as np
import pytest

from aecpost.signals import AudioSignal

# Filled by tests/test_acceptance.py; printed at the end of the session.
ACCEPTANCE_LINES = {}


def record_acceptance(number, name, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def white_signal(rng):
    return AudioSignal(0.1 * rng.standard_normal(16000), 16000)
