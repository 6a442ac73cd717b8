import numpy as np
import pytest

_ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "passed": True, "details": [], "ran": False})
    if rep.when == "call" or rep.failed:
        entry["ran"] = True
        if rep.failed:
            entry["passed"] = False
        for key, value in item.user_properties:
            if key == "detail":
                entry["details"].append(f"{item.callspec.id if hasattr(item, 'callspec') else ''} {value}".strip())


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[number]
        if not entry["ran"]:
            continue
        status = "PASS" if entry["passed"] else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {entry['title']}")
        for d in entry["details"]:
            terminalreporter.write_line(f"           {d}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
