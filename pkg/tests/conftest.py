import pytest

_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record the outcome line for one acceptance criterion.

    Call it with ``(number, passed, detail)``; ``passed=None`` marks a
    report-only criterion.  The lines are printed in the terminal summary
    whatever pytest's capture mode.
    """
    def record(number: int, passed: bool, detail: str):
        _CRITERIA[number] = (passed, detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        status = "REPORT" if passed is None else "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
