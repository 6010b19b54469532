import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stubs import StubServer  # noqa: E402


@pytest.fixture
def stub_server():
    server = StubServer()
    yield server
    server.stop()


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion that was exercised."""
    try:
        import test_acceptance
    except ImportError:
        return
    if not test_acceptance.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok in test_acceptance.VERDICTS:
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{verdict}] {label}")
