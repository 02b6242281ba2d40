"""Pytest wiring: collects acceptance-criterion result lines and prints
them as a terminal section, so the one-line-per-criterion report survives
output capture."""

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
