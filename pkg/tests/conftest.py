import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict line (``ok=None`` for declared substitutions)."""

    def record(number: int, ok: bool | None, detail: str) -> bool:
        verdict = "NOT REPRODUCED" if ok is None else ("PASS" if ok else "FAIL")
        ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {verdict}  {detail}"
        print(ACCEPTANCE_LINES[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
