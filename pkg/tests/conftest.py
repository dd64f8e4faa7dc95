"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""

_RESULTS: dict[str, list[str]] = {}


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        item.user_properties.append(("criterion", marker.args[0]))


def pytest_runtest_logreport(report):
    name = dict(report.user_properties).get("criterion")
    if name is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _RESULTS.setdefault(name, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _RESULTS.items():
        ok = all(o == "passed" for o in outcomes)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
