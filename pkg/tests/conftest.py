import pytest

_ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def acceptance_summary():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s[2:s.index("]")])):
            terminalreporter.write_line(line)
