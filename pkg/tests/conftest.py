import pytest

ACCEPTANCE_LINES = {}


@pytest.fixture
def record_criterion():
    """Register a one-line pass/fail summary for an acceptance criterion."""

    def record(tag, passed, detail):
        line = f"{tag} {'PASS' if passed else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES[tag] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for tag in sorted(ACCEPTANCE_LINES, key=lambda t: int(t[1:])):
        terminalreporter.write_line(ACCEPTANCE_LINES[tag])
