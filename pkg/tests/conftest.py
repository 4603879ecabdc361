import pytest

from coalseg import tensor

# Acceptance tests append one "[PASS]/[FAIL] criterion ..." line each; the
# summary hook prints them after the run so they survive output capture.
ACCEPTANCE_LINES: list = []


@pytest.fixture(autouse=True)
def _debug_checks():
    """Screen every op result for NaN/Inf while tests run."""
    tensor.set_debug_checks(True)
    yield
    tensor.set_debug_checks(False)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
