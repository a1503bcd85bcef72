import numpy as np
import pytest

from proxyconf.synth import generate_cohort, shipped_dgp

# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def reference_dgp():
    return shipped_dgp("reference")


@pytest.fixture(scope="session")
def small_reference_cohort(reference_dgp):
    return generate_cohort(reference_dgp.replace(n=4000, seed=11))


@pytest.fixture(scope="session")
def k2_cohort():
    return generate_cohort(shipped_dgp("binary_k2").replace(n=3000, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
