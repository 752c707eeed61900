import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    """Record the outcome of a numbered acceptance criterion for the summary."""

    def record(number, passed, detail):
        _RESULTS[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        passed, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
