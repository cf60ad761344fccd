import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    detail = next((v for k, v in item.user_properties if k == "detail"), "")
    failed = rep.failed
    if rep.when == "call" or failed:
        prev = _criteria.get(label)
        if prev is None or prev[0] == "PASS":
            _criteria[label] = ("FAIL" if failed else "PASS", detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_criteria, key=lambda s: int(s.split()[0])):
        status, detail = _criteria[label]
        terminalreporter.write_line(f"criterion {label}: {status}" + (f"  [{detail}]" if detail else ""))
