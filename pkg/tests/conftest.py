import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[str, str] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.failed:
        if _criteria.get(name) != "FAIL":
            _criteria[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda n: int(n.split("_")[2])):
        label = " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"criterion {name.split('_')[2]} ({label}): {_criteria[name]}")
