"""Collects acceptance outcomes and prints one line per criterion after the run."""

import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}
_NOTES: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def report(request):
    """``report("text")`` attaches a measured value to the criterion line."""
    marker = request.node.get_closest_marker("criterion")
    number = marker.args[0] if marker else 0

    def add(text: str):
        _NOTES.setdefault(number, []).append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        _RESULTS[number] = (status, title, item.name)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, title, _ = _RESULTS[number]
        notes = "; ".join(_NOTES.get(number, []))
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}" + (f"  [{notes}]" if notes else ""))
