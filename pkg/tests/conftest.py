import os

# Every simulation in the test run asserts its accounting invariants.
os.environ.setdefault("MISOSIM_DEBUG", "1")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
