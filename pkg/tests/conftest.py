import re
import sys
from pathlib import Path

from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


# --- acceptance report: one PASS/FAIL line per criterion -------------------------

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_criteria: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None:
        return
    n, name = int(m.group(1)), m.group(2).replace("_", " ")
    if report.failed or report.skipped:
        _criteria[n] = (name, "FAIL")
    elif report.when == "call" and n not in _criteria:
        _criteria[n] = (name, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        name, verdict = _criteria[n]
        terminalreporter.write_line(f"criterion {n} ({name}): {verdict}")
