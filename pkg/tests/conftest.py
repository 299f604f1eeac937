"""Collects the acceptance-criterion verdicts and prints them after the run."""

ACCEPTANCE_LINES: dict[str, str] = {}


def report(key: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[key] = f"{key} {'PASS' if passed else 'FAIL'}: {detail}"
    print(ACCEPTANCE_LINES[key])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k[2:]) if k[2:].isdigit() else 99):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
