"""Collects one verdict line per acceptance criterion and prints them after the run."""

import pytest

_LINES = {}


@pytest.fixture
def verdict(request):
    """Call ``verdict(number, ok, detail)`` once per criterion; the line is printed and kept for the summary."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_LINES):
        terminalreporter.write_line(_LINES[number])
