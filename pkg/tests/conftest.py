import pytest

# criterion number -> (status, detail), filled as acceptance tests finish
_VERDICTS: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    if report.skipped:
        _VERDICTS[n] = ("SKIP", str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else "")
    elif report.failed:
        _VERDICTS[n] = ("FAIL", detail or f"{report.when} raised")
    elif report.when == "call":
        _VERDICTS[n] = ("PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_VERDICTS):
        status, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}".rstrip())
