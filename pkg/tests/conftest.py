import numpy as np
import pytest

_ACCEPTANCE: dict = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    """Store one acceptance verdict and echo it immediately."""
    _ACCEPTANCE[number] = (passed, detail)
    print(f"\nACCEPTANCE {number:2d}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{number:2d} {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
