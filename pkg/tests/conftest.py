from __future__ import annotations

import pytest

from support import Cluster, line_topology

# criterion number -> (title, outcomes of every test that checks it)
_criteria: dict[int, tuple[str, list[str]]] = {}


@pytest.fixture
def cluster(tmp_path):
    c = Cluster(line_topology(3), tmp_path)
    yield c
    c.close()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    _, outcomes = _criteria.setdefault(number, (title, []))
    # a setup error or a failing call both count against the criterion
    if report.when == "call" or report.failed:
        outcomes.append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcomes = _criteria[number]
        verdict = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {title}")
