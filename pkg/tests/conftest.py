"""Shared pytest wiring: the acceptance gate's end-of-run verdict block."""

verdict_lines = []


def pytest_terminal_summary(terminalreporter):
    if verdict_lines:
        terminalreporter.write_sep("=", "acceptance gate")
        for line in verdict_lines:
            terminalreporter.write_line(line)
