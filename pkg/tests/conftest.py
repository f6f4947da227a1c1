"""Per-criterion summary for the acceptance suite.

Tests marked ``@pytest.mark.criterion(n)`` contribute to criterion ``n``; a
criterion passes only if every one of its tests passed.  Tests may attach a
short measurement through the ``measured`` fixture, which is shown next to
the verdict at the end of the run.
"""

from collections import defaultdict

import pytest

_outcomes: dict[int, list[tuple[str, str]]] = defaultdict(list)
_details: dict[int, list[str]] = defaultdict(list)


@pytest.fixture
def measured(request):
    marker = request.node.get_closest_marker("criterion")

    def note(text: str) -> None:
        if marker is not None:
            _details[marker.args[0]].append(text)

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes[marker.args[0]].append((item.name, "passed" if rep.passed else rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        results = _outcomes[n]
        ok = all(status == "passed" for _, status in results)
        failed = [name for name, status in results if status != "passed"]
        detail = "; ".join(_details.get(n, []))
        if failed:
            detail = (detail + "; " if detail else "") + "failing: " + ", ".join(failed)
        tr.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
