"""Shared pytest plumbing for the release gate.

Acceptance tests register one line per shipping criterion; a
terminal-summary hook prints the collected block at the end of the run
so the lines stay visible under every capture mode (default fd capture
would swallow direct stdout writes from passing tests).
"""

RELEASE_GATE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if RELEASE_GATE_LINES:
        terminalreporter.section("release gate")
        for line in RELEASE_GATE_LINES:
            terminalreporter.write_line(line)
