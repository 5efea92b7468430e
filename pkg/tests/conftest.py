from __future__ import annotations

import socket

import pytest

from helpers import cached_scenario


@pytest.fixture(autouse=True, scope="session")
def deny_network():
    """Every test runs hermetically: outbound socket connections fail loudly."""
    real_connect = socket.socket.connect
    real_connect_ex = socket.socket.connect_ex

    def guarded(self, address):
        if self.family == getattr(socket, "AF_UNIX", object()):
            return real_connect(self, address)
        raise RuntimeError(f"network access attempted during tests: {address!r}")

    def guarded_ex(self, address):
        if self.family == getattr(socket, "AF_UNIX", object()):
            return real_connect_ex(self, address)
        raise RuntimeError(f"network access attempted during tests: {address!r}")

    socket.socket.connect = guarded
    socket.socket.connect_ex = guarded_ex
    yield
    socket.socket.connect = real_connect
    socket.socket.connect_ex = real_connect_ex


@pytest.fixture(scope="session")
def ransomware():
    return cached_scenario("ransomware-01")


@pytest.fixture(scope="session")
def exfil():
    return cached_scenario("exfiltration-01")


# ---------------------------------------------------------------------------
# one PASS/FAIL line per acceptance criterion

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    number, title = marker.args[0], marker.args[1] if len(marker.args) > 1 else ""
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "tests": 0})
    if report.when == "call":
        entry["tests"] += 1
    if report.failed or hasattr(report, "wasxfail"):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        verdict = "PASS" if e["ok"] and e["tests"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {e['title']}")
