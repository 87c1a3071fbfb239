"""Shared hooks: collect acceptance verdict lines and echo them in the terminal summary."""

VERDICTS: list = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
