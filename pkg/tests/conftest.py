import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    """Collect one pass/fail line per acceptance criterion; the lines are
    echoed in the terminal summary so they survive output capture."""

    def _record(name: str, passed: bool, detail: str = "") -> None:
        status = "PASS" if passed else "FAIL"
        suffix = f" ({detail})" if detail else ""
        ACCEPTANCE_LINES.append(f"[{status}] {name}{suffix}")

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
