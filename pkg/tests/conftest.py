import pytest


@pytest.fixture
def criterion(record_property):
    """Tag an acceptance test with its criterion label for the summary."""

    def tag(label):
        record_property("criterion", label)

    return tag


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            label = dict(getattr(rep, "user_properties", ())).get("criterion")
            if label:
                lines.append((label, "PASS" if outcome == "passed" else "FAIL"))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for label, verdict in sorted(lines, key=lambda t: int(t[0].split()[0][1:])):
        terminalreporter.write_line(f"{verdict}  {label}")
