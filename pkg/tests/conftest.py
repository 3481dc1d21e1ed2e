import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Records one pass/fail line for the acceptance summary.

    Usage: criterion(number, title, passed, detail).  The line is printed
    right away and repeated in the terminal summary.
    """
    lines = request.config.stash[_LINES]

    def record(number: int, title: str, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}: {detail}"
        lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
