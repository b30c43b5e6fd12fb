import pytest

# criterion number -> (description, status); a criterion split over several
# tests fails if any of them fails
_OUTCOMES: dict = {}
_RANK = {"PASS": 0, "SKIP": 1, "FAIL": 2}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.skipped or rep.failed):
        n, text = mark.args
        status = "SKIP" if rep.skipped else ("PASS" if rep.passed else "FAIL")
        prev = _OUTCOMES.get(n, (text, "PASS"))[1]
        _OUTCOMES[n] = (text, max(prev, status, key=_RANK.get))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        text, status = _OUTCOMES[n]
        terminalreporter.write_line(f"criterion {n:>2} {status}: {text}")
