import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")


@pytest.fixture
def detail(request):
    """Record a short measurement shown next to the criterion's pass/fail line."""
    def add(text):
        request.node.user_properties.append(("detail", str(text)))
    return add


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    n = dict(report.user_properties).get("criterion")
    if n is None:
        return
    notes = [v for k, v in report.user_properties if k == "detail"]
    _RESULTS[n] = ("PASS" if report.passed else "FAIL", "; ".join(notes))


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    m = item.get_closest_marker("acceptance")
    if m is not None:
        item.user_properties.append(("criterion", int(m.args[0])))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, note = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {note}".rstrip())
