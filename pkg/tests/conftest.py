import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of an acceptance criterion: ``criterion(n, passed, detail)``."""

    def record(n: int, passed: bool, detail: str) -> bool:
        _RESULTS[n] = (bool(passed), detail)
        print(f"CRITERION {n}: {'PASS' if passed else 'FAIL'} - {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        passed, detail = _RESULTS[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if passed else 'FAIL'} - {detail}")
