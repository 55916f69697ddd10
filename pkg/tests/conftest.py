"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_OUTCOMES: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    n = props.get("criterion")
    if n is None:
        return
    entry = _OUTCOMES.setdefault(n, {"title": props.get("title", ""), "ok": True, "detail": ""})
    if report.when == "call" or report.failed:
        entry["ok"] = entry["ok"] and report.passed
    if props.get("detail"):
        entry["detail"] = props["detail"]


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        e = _OUTCOMES[n]
        line = f"criterion {n}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["detail"]:
            line += f"  [{e['detail']}]"
        tr.write_line(line)


@pytest.fixture(autouse=True)
def _criterion_props(request):
    m = request.node.get_closest_marker("criterion")
    if m is not None:
        request.node.user_properties += [("criterion", m.args[0]), ("title", m.args[1])]


@pytest.fixture
def detail(request):
    """Attach a short observed-values note to the criterion line."""
    def note(text: str) -> None:
        request.node.user_properties.append(("detail", text))
    return note
