import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """Report one acceptance criterion: prints a PASS/FAIL line, then asserts."""
    lines = request.config.stash.setdefault(_LINES, [])

    def report(name: str, passed: bool, detail: str = ""):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert passed, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
