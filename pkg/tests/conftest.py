"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_RESULTS: dict[int, tuple[str, str]] = {}
_RANK = {"PASS": 0, "SKIP": 1, "FAIL": 2}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when != "call" and not (report.skipped or report.failed):
        return
    n, title = marker.args
    status = "SKIP" if report.skipped else "FAIL" if report.failed else "PASS"
    previous = _RESULTS.get(n)
    # a criterion spread over several tests reports its worst outcome
    if previous is None or _RANK[status] > _RANK[previous[0]]:
        _RESULTS[n] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title}")
