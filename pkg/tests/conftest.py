import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def report(key, ok, detail):
        line = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[key] = line
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int(k.rstrip("abc")), k)):
        terminalreporter.write_line(_CRITERIA[key])
