import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record one acceptance line; the full list is repeated in the terminal summary."""

    def record(name: str, passed: bool, details: str) -> bool:
        line = f"CRITERION {name}: {'PASS' if passed else 'FAIL'} ({details})"
        _CRITERIA.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
