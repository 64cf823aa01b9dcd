import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def emit(capsys):
    """Record one acceptance line and show it immediately, outside output capture."""
    def _emit(number: int, ok: bool, detail: str) -> None:
        line = f"[criterion {number:>2}] {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        with capsys.disabled():
            print("\n" + line, flush=True)
    return _emit


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
