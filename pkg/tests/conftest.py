from __future__ import annotations

import pytest

_LINES: list[tuple[int, str]] = []


@pytest.fixture
def criterion():
    """Recorder printing one PASS/FAIL line per acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({detail})"
        print(line)
        _LINES.append((number, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        seen = {n for n, _ in _LINES}
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
        for n in range(1, 11):
            if n not in seen:
                terminalreporter.write_line(f"NOT RUN criterion {n} (skipped or deselected)")
