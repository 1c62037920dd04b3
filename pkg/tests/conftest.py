import pytest

RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    name = marker.args[0]
    if report.when == "setup" and report.passed:
        return
    if hasattr(report, "wasxfail"):
        status = "FAIL (expected: " + report.wasxfail + ")"
    else:
        status = "PASS" if report.passed else "FAIL"
    detail = dict(item.user_properties).get("detail", "")
    RESULTS[name] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in RESULTS.items():
        terminalreporter.write_line(f"{status.split(' ')[0]:<5} {name}" + (f"  [{detail}]" if detail else ""))
        if status.startswith("FAIL ("):
            terminalreporter.write_line(f"      {status[5:]}")
