import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(num, title): benchmark acceptance criterion"
    )


_results: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    marker_info = getattr(report, "_acceptance", None)
    if marker_info:
        num, title = marker_info
        _results[num] = (title, "PASS" if report.passed else "FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker:
        report._acceptance = (marker.args[0], marker.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(_results):
        title, status = _results[num]
        terminalreporter.write_line(f"[{status}] criterion {num}: {title}")
