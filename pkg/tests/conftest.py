"""Shared test plumbing: the acceptance suite records one line per
criterion and this hook prints them in the terminal summary, where
pytest's output capture cannot swallow them."""

ACCEPTANCE_LINES = []


def record_criterion(number, description, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    line = f"criterion {number:02d} [{status}] {description}"
    if detail:
        line += f" — {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
