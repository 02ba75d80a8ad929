import re

import numpy as np
import pytest

_ACCEPTANCE = {}
_DETAILS = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance_detail(request):
    """Attach a one-line measurement to the acceptance summary."""

    def record(text):
        _DETAILS[request.node.nodeid] = text

    return record


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in sorted(_ACCEPTANCE.items(), key=lambda kv: kv[0]):
        m = re.search(r"test_criterion_(\d+)_(\w+)", nodeid)
        if not m:
            continue
        name = m.group(2).replace("_", " ")
        status = "PASS" if outcome == "passed" else "FAIL"
        detail = _DETAILS.get(nodeid, "")
        terminalreporter.write_line(f"[{status}] criterion {int(m.group(1)):2d} {name}" + (f": {detail}" if detail else ""))
