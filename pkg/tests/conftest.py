import pytest

# one line per acceptance criterion, filled in by test_acceptance.py
CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    """Record PASS/FAIL for the criterion named by the test's ``crit`` marker."""
    marker = request.node.get_closest_marker("crit")
    key, title = marker.args
    CRITERIA[key] = (False, title)
    yield
    rep = getattr(request.node, "rep_call", None)
    CRITERIA[key] = (rep is not None and rep.passed, title)


@pytest.hookimpl(hookwrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=lambda k: int(k[1:])):
        ok, title = CRITERIA[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {title}")
