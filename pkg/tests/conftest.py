import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    if acceptance_report.LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(acceptance_report.LINES):
            terminalreporter.write_line(acceptance_report.LINES[key])
