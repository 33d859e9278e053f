import pytest

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.fixture
def verdict(request, capsys):
    """Record one PASS/FAIL line per acceptance criterion and fail the test on FAIL."""
    store = request.config.stash[_VERDICTS]
    num = request.node.get_closest_marker("criterion").args[0]

    def report(ok, detail):
        line = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        store[num] = line
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line

    yield report
    if num not in store:
        store[num] = f"criterion {num:2d}: FAIL  raised before a verdict"


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash[_VERDICTS]
    if store:
        terminalreporter.section("acceptance criteria")
        for num in sorted(store):
            terminalreporter.write_line(store[num])
