import pytest

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    name = mark.args[0]
    ok = _results.get(name, True) and not rep.failed
    _results[name] = ok


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_results, key=lambda s: int(s[2:])):
        terminalreporter.write_line(f"{name} {'PASS' if _results[name] else 'FAIL'}")
