import re
import time

import pytest

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    start = time.perf_counter()
    yield
    item.user_properties.append(("elapsed", time.perf_counter() - start))


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    entry = _CRITERIA.setdefault(n, {"name": m.group(2), "ok": True, "elapsed": 0.0, "detail": ""})
    if report.failed:
        entry["ok"] = False
        entry["detail"] = report.longrepr.reprcrash.message.splitlines()[0] if hasattr(
            report.longrepr, "reprcrash") and report.longrepr.reprcrash else "error"
    if report.when == "call":
        props = dict(report.user_properties)
        entry["elapsed"] = props.get("elapsed", report.duration)
        entry["summary"] = props.get("summary", "")
        if report.skipped:
            entry["ok"] = None


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[e["ok"]]
        line = f"criterion {n} ({e['name']}): {status} in {e['elapsed']:.1f}s"
        if e.get("summary"):
            line += f"; {e['summary']}"
        if e["ok"] is False and e["detail"]:
            line += f" -- {e['detail']}"
        terminalreporter.write_line(line)
