import pytest

ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture
def report_criterion():
    """Record the pass/fail line for an acceptance criterion."""

    def record(key: str, passed: bool, detail: str) -> bool:
        line = f"{key} {'PASS' if passed else 'FAIL'} {detail}"
        ACCEPTANCE_LINES[key] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
