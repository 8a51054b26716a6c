import numpy as np
import pytest
from hypothesis import settings

from flexwalk.centroidal import SystemMatrices

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

T_STAB = 0.002
OMEGA_SQ = 11.276


@pytest.fixture
def sys500():
    return SystemMatrices(T_STAB, OMEGA_SQ)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    return pytestconfig.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
