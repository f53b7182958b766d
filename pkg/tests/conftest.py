import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

# filled in by tests/test_acceptance.py; echoed after the run so the
# per-criterion verdicts are visible even with output capture on
acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
