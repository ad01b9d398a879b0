import sys
from pathlib import Path

from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    if acceptance_report.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_report.lines():
            terminalreporter.write_line(line)
