"""Collects per-criterion outcomes of the acceptance tests and prints one line per criterion."""

import pytest

_RESULTS: dict[int, dict] = {}
_RANK = {"PASS": 0, "SKIP": 1, "FAIL": 2}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, title = mark.args
    entry = _RESULTS.setdefault(num, {"title": title, "status": "PASS", "notes": []})
    if rep.when == "call" or rep.outcome != "passed":
        status = {"passed": "PASS", "skipped": "SKIP"}.get(rep.outcome, "FAIL")
        if _RANK[status] > _RANK[entry["status"]]:
            entry["status"] = status
        if rep.outcome == "skipped" and isinstance(rep.longrepr, tuple):
            entry["notes"].append(f"{item.name}: skipped ({rep.longrepr[2]})")
        elif rep.outcome == "failed":
            entry["notes"].append(f"{item.name}: FAILED")
    if rep.when == "call":
        entry["notes"].extend(f"{item.name}: {v}" for k, v in item.user_properties if k == "observed")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_RESULTS):
        e = _RESULTS[num]
        tr.write_line(f"[{e['status']}] criterion {num}: {e['title']}")
        for note in e["notes"]:
            tr.write_line(f"         {note}")
