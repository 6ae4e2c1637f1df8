"""Shared fixtures; collects the acceptance-criterion verdict lines."""

import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """``verdict(criterion, ok, detail)`` records and prints one PASS/FAIL line."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
