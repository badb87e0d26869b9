import pytest

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance_line(request):
    """Record one summary line per acceptance criterion."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def record(number, passed, detail):
        lines.append((number, f"{'PASS' if passed else 'FAIL'}  [{number}] {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
