import verdicts


def pytest_terminal_summary(terminalreporter):
    lines = verdicts.lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
