import pytest

from helpers import ACCEPTANCE_RESULTS
from promptpolicy.synthenv import calibrate


@pytest.fixture(scope="session")
def calibrated_env():
    env, _ = calibrate()
    return env


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title} :: {detail}")
