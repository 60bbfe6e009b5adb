from __future__ import annotations

import pytest

_CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(label, ok, detail)``."""
    seen = []

    def record(label: str, ok: bool, detail: str) -> None:
        seen.append(label)
        _CRITERIA[label] = (bool(ok), detail)

    yield record
    if not seen:
        _CRITERIA[request.node.name] = (False, "raised before reaching its check")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, (ok, detail) in _CRITERIA.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
