"""Collect the acceptance verdict lines and print them after the run."""
import pytest

VERDICTS: list[str] = []
NOTES: list[str] = []


@pytest.fixture
def verdict():
    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
        VERDICTS.append(line)
        print(line)
        return ok

    return record


@pytest.fixture
def note():
    """Extra lines printed after the verdicts (e.g. the few-shot result table)."""
    return NOTES.append


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
    for line in NOTES:
        terminalreporter.write_line(line)
