import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# criterion number -> {"title", "outcomes", "details"}
_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            num, title = mark.args
            _CRITERIA.setdefault(num, {"title": title, "outcomes": [], "details": []})


@pytest.fixture
def acceptance_detail(request):
    """Append a one-line measurement to the criterion summary."""
    mark = request.node.get_closest_marker("criterion")

    def note(text: str) -> None:
        if mark:
            _CRITERIA[mark.args[0]]["details"].append(text)

    return note


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for num, info in _CRITERIA.items():
        if f"::test_criterion_{num:02d}_" in report.nodeid:
            info["outcomes"].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        info = _CRITERIA[num]
        outcomes = info["outcomes"]
        if not outcomes:
            status = "NOT RUN"
        elif "failed" in outcomes:
            status = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        detail = "; ".join(info["details"])
        tr.write_line(f"criterion {num:2d} {status:7s} {info['title']}" + (f" -- {detail}" if detail else ""))
