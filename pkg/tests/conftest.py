import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record and print one PASS/FAIL line per acceptance criterion."""

    def report(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
        _LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
