"""Collects the acceptance-criterion verdicts and prints them after the run."""

VERDICTS = []


def record(number, passed, detail):
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    VERDICTS.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(VERDICTS):
        terminalreporter.write_line(line)
