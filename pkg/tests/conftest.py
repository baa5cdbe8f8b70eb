import pytest

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if rep.passed else "FAIL"
    _criteria[number] = (title, status, detail)
    # also visible live with -s
    print(f"\n[{status}] criterion {number}: {title}" + (f" | {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        title, status, detail = _criteria[number]
        line = f"[{status}] criterion {number:>2}: {title}"
        if detail:
            line += f" | {detail}"
        terminalreporter.write_line(line)
