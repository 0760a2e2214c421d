import re

# criterion number -> measured detail, filled in by test_acceptance.py
ACCEPTANCE_DETAILS = {}
_outcomes = {}
_PATTERN = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    key = int(m.group(1))
    if report.when == "call" or report.failed or report.skipped:
        prev = _outcomes.get(key, (None, None))[0]
        if prev != "failed":
            _outcomes[key] = (report.outcome, m.group(2))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(_outcomes):
        outcome, name = _outcomes[key]
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        detail = ACCEPTANCE_DETAILS.get(key, "")
        terminalreporter.write_line(f"criterion {key:2d} {status}  {name}  {detail}".rstrip())
