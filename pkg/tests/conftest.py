import numpy as np
import pytest

# criterion number -> (name, passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20171)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {name}: {detail}")
