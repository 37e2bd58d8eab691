"""Collects one verdict per acceptance criterion and prints them at the end."""

import pytest

_VERDICTS = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of an acceptance criterion test.

    Usage: ``criterion(3, "accuracy 0.93")``; the verdict is PASS when the
    test body finishes, FAIL otherwise.
    """
    state = {}

    def note(number, detail=""):
        state["number"] = number
        state["detail"] = detail

    yield note
    if "number" in state:
        rep = getattr(request.node, "rep_call", None)
        passed = rep is not None and rep.passed
        _VERDICTS.setdefault(state["number"], []).append((passed, request.node.name, state["detail"]))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        results = _VERDICTS[number]
        ok = all(p for p, _, _ in results)
        details = "; ".join(d for _, _, d in results if d)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {details}")
