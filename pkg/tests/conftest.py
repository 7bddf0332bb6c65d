import pytest

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    """Record one pass/fail line (or SKIP when ``passed`` is None) for the terminal summary."""

    def _report(number: int, passed: bool | None, detail: str):
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        line = f"[{status}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return _report
