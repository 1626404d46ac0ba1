"""Shared pytest wiring.

The acceptance module gets a dedicated end-of-run summary: one PASSED/FAILED
line per criterion, so the verdict is readable without scrolling the full
test log.
"""

_acceptance_results = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        _acceptance_results.append((name, "PASSED" if report.passed else "FAILED"))
    elif report.when == "setup" and (report.failed or report.skipped):
        _acceptance_results.append((name, "SKIPPED" if report.skipped else "FAILED"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _acceptance_results:
        terminalreporter.write_line(f"[acceptance] {name}: {status}")
