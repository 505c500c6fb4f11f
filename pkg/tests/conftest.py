import pytest

from vanetsim.geo import GeoPosition

AVEIRO = GeoPosition(40.6405, -8.6538)


@pytest.fixture
def aveiro():
    return AVEIRO


# -- acceptance criteria report ---------------------------------------------------------

CRITERIA = {
    1: "codec soundness", 2: "control/data separation", 3: "connection-manager oracle",
    4: "proactive rule consistency", 5: "exactly-once pipeline", 6: "LoRa duty cycle",
    7: "throughput calibration", 8: "technology precedence", 9: "radar accuracy",
    10: "congestion clustering", 11: "collision avoidance", 12: "EV dissemination",
    13: "edge vs cloud latency", 14: "determinism",
}
_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes.setdefault(marker.args[0], []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        runs = _outcomes.get(n)
        status = "NOT RUN" if runs is None else "PASS" if all(runs) else "FAIL"
        terminalreporter.write_line(f"C{n:02d} {name:<30} {status}")
