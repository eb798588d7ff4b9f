import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def acceptance(request, capsys):
    """Record one pass/fail line per acceptance criterion.

    Lines are echoed immediately and repeated in the terminal summary.
    """

    def record(label: str, passed: bool, detail: str) -> bool:
        line = f"{label} {'PASS' if passed else 'FAIL'}: {detail}"
        request.config.stash[_LINES_KEY].append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
