import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def measured(request):
    """Tests append short measurement strings shown next to their verdict."""
    notes = []
    request.node.user_properties.append(("measured", notes))
    return notes


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    marker = report.user_properties and dict(report.user_properties).get("criterion")
    if marker:
        notes = dict(report.user_properties).get("measured", [])
        _RESULTS[marker] = ("PASS" if report.passed else "FAIL", "; ".join(notes))


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    m = item.get_closest_marker("criterion")
    if m:
        item.user_properties.append(("criterion", (m.args[0], m.args[1])))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), (verdict, notes) in sorted(_RESULTS.items()):
        line = f"criterion {num} {verdict}: {title}"
        terminalreporter.write_line(line + (f" [{notes}]" if notes else ""))
