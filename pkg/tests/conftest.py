"""Shared pytest hooks for the suite.

The acceptance tests record one ``criterion NN <name>: PASS|FAIL`` line
each; this hook echoes the collected lines in the terminal summary so a
full run always ends with a per-criterion scoreboard, whatever the
capture settings.
"""

_criterion_lines = []


def record_criterion(line):
    _criterion_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(set(_criterion_lines)):
            terminalreporter.write_line(line)
