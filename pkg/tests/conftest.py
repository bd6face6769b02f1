import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# acceptance criterion -> (passed, one-line summary), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {key:>2}: {line}")


@pytest.fixture
def record_criterion():
    def record(n: int, ok: bool, line: str):
        ACCEPTANCE[n] = (bool(ok), line)
        print(f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {line}")
        return ok
    return record
