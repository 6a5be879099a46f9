import re

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not match:
        return
    number, name = int(match.group(1)), match.group(2).split("[")[0].replace("_", " ")
    if report.when == "call" or report.failed:
        previous = _ACCEPTANCE.get(number, (name, "PASS"))[1]
        status = "FAIL" if report.failed or previous == "FAIL" else "PASS"
        _ACCEPTANCE[number] = (name, status)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        name, status = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {name}")
