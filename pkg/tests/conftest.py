import re

_CRITERION_PATTERN = re.compile(r"test_c(\d{2})_([a-z0-9_]+)")
_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    m = _CRITERION_PATTERN.search(report.nodeid)
    if not m or "test_acceptance" not in report.nodeid:
        return
    num = int(m.group(1))
    name = m.group(2).replace("_", " ")
    _RESULTS[num] = (name, report.outcome.upper().replace("PASSED", "PASS")
                     .replace("FAILED", "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(_RESULTS):
        name, outcome = _RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d} ({name}): {outcome}")
