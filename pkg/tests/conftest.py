"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_OUTCOMES: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when != "call" and report.outcome == "passed":
        return
    number, title = marker.args
    entry = _OUTCOMES.setdefault(number, {"title": title, "passed": 0, "failed": 0, "skipped": 0})
    entry[report.outcome] += 1


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        e = _OUTCOMES[number]
        if e["failed"]:
            verdict = "FAIL"
        elif e["passed"]:
            verdict = "PASS"
        else:
            verdict = "SKIP"
        terminalreporter.write_line(
            f"criterion {number:2d} {verdict}  {e['title']} "
            f"(passed={e['passed']} failed={e['failed']} skipped={e['skipped']})")
