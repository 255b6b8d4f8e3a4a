"""Collects the acceptance-criterion outcomes and prints one PASS/FAIL line
per criterion in the terminal summary, so a full-suite run ends with an
at-a-glance acceptance report."""

import re

import pytest

_CRITERION = re.compile(r"test_criterion_(\d+)")
_results: dict[int, bool] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    match = _CRITERION.match(item.name)
    if match is None:
        return
    number = int(match.group(1))
    if report.failed:
        _results[number] = False
    elif report.when == "call" and report.passed:
        # A later phase failure (teardown) still flips this to False above.
        _results.setdefault(number, True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        verdict = "PASS" if _results[number] else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {number}: {verdict}")
