from __future__ import annotations

import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def detail(request):
    """Attach a one-line measurement summary to an acceptance test."""
    notes: list[str] = []
    request.node.acceptance_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = mark.args
    notes = "; ".join(getattr(item, "acceptance_notes", []))
    _RESULTS[number] = ("PASS" if rep.passed else "FAIL", title, notes)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, title, notes = _RESULTS[number]
        line = f"{status} criterion {number}: {title}"
        terminalreporter.write_line(f"{line} ({notes})" if notes else line)
