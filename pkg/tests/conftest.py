from collections import defaultdict

import pytest
from hypothesis import settings

settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")

_outcomes: dict[int, list[bool]] = defaultdict(list)
_titles: dict[int, str] = {}
_details: dict[int, list[str]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def measured(request):
    """Attach measured values to the criterion line of the current test."""
    marker = request.node.get_closest_marker("criterion")

    def note(text: str) -> None:
        if marker is not None:
            _details[marker.args[0]].append(text)

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    _titles[number] = title
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes[number].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _titles:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_titles):
        ok = bool(_outcomes[number]) and all(_outcomes[number])
        detail = "; ".join(_details[number])
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {_titles[number]}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
