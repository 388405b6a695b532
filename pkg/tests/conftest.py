import pytest

CRITERIA: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n, title = marker.args
    outcome = "PASS" if call.excinfo is None else "FAIL"
    prev = CRITERIA.get(n)
    if prev is not None and prev[1] == "FAIL":
        outcome = "FAIL"
    duration = call.stop - call.start + (prev[2] if prev else 0.0)
    CRITERIA[n] = (title, outcome, duration)


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, outcome, duration = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {outcome}  {title}  ({duration:.2f}s)")
