"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line for each."""

import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported at the end")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    failed = report.failed or report.skipped
    if report.when != "call" and not failed:
        return
    name = marker.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    prev_ok = item.config._criteria.get(name, (True, ""))[0]
    item.config._criteria[name] = (prev_ok and not failed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config._criteria
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in results.items():
        line = f"{'PASS' if ok else 'FAIL'}  {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
