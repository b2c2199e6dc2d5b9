import pytest
from hypothesis import HealthCheck, settings

from robust_bsde.stochastic import make_time_grid

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def grid50():
    return make_time_grid(1.0, 50)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, when the gate ran."""
    from test_acceptance import SUMMARY

    if SUMMARY:
        terminalreporter.section("acceptance criteria")
        for line in SUMMARY:
            terminalreporter.write_line(line)
