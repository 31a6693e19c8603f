"""Collects the outcome of every ``acceptance``-marked test and prints one line each."""

import pytest

_OUTCOMES: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or report.when != "call" and report.passed:
        return
    number, title = mark.args
    if report.when == "call" or report.failed:
        state = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        _OUTCOMES[number] = (title, state, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        title, state, secs = _OUTCOMES[number]
        terminalreporter.write_line(f"[{state}] criterion {number}: {title} ({secs:.1f} s)")
