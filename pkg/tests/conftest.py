"""Shared fixtures: the acceptance-criteria report.

Each acceptance test records one line before asserting, so the summary
block at the end of a run shows every criterion with its measured
numbers even when some of them fail.
"""

import pytest

_LINES: list[tuple[int, str, bool, str]] = []


def _record(index: int, label: str, ok: bool, detail: str = "") -> None:
    _LINES.append((index, label, bool(ok), detail))


@pytest.fixture(scope="session")
def criterion_report():
    """Callable ``(index, label, ok, detail)`` feeding the summary block."""
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for index, label, ok, detail in sorted(_LINES):
        status = "PASS" if ok else "FAIL"
        line = f"[{status}] {index}. {label}"
        if detail:
            line += f": {detail}"
        terminalreporter.write_line(line)
