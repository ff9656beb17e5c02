"""Collects one status line per acceptance criterion and prints them at the end of the run."""

import pytest

CRITERIA_LINES: dict[int, str] = {}


class CriterionLog:
    def __init__(self, number):
        self.number = number

    def record(self, ok: bool, detail: str) -> bool:
        line = f"criterion {self.number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA_LINES[self.number] = line
        print(line)
        return ok


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    number = marker.args[0]
    log = CriterionLog(number)
    yield log
    if number not in CRITERIA_LINES:
        CRITERIA_LINES[number] = f"criterion {number:>2}: FAIL  (did not complete)"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA_LINES):
        terminalreporter.write_line(CRITERIA_LINES[number])
