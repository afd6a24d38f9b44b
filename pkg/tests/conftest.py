import sys
from collections import defaultdict
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "gradient correctness (finite differences, both mask modes)",
    2: "loss-term equivalences",
    3: "metric oracle equivalence",
    4: "decoder invariants",
    5: "end-to-end trends against the LA=0 full-sequence baseline",
    6: "lambda monotonicity of AWT",
    7: "role analysis: interregnum and reparandum waits",
    8: "misclassification ordering: reparandum above fluent",
    9: "format round-trips and log-pure reports",
}

_outcomes: dict[int, list[bool]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes[marker.args[0]].append(report.outcome == "passed")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n not in _outcomes:
            continue
        results = _outcomes[n]
        status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status} - {title} ({sum(results)}/{len(results)} checks)")
