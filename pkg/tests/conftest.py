import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or rep.outcome != "passed":
        prev = _RESULTS.get(number)
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        # a failure in any phase sticks
        if prev is None or prev[1] != "FAIL":
            detail = ""
            if rep.outcome == "skipped" and isinstance(rep.longrepr, tuple):
                detail = rep.longrepr[2]
            elif rep.outcome == "failed":
                detail = rep.longreprtext.strip().splitlines()[-1] if rep.longreprtext else ""
            _RESULTS[number] = (title, status, rep.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, status, secs, detail = _RESULTS[number]
        line = f"{status}  criterion {number}: {title} ({secs:.1f} s)"
        if detail and status != "PASS":
            line += f"  -- {detail[:160]}"
        terminalreporter.write_line(line)
