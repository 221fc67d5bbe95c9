import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from breakdown.harness import draw

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def uniform_4000():
    return draw("uniform-mean", 4000, 0)


@pytest.fixture(scope="session")
def logit_4000():
    return draw("logit", 4000, 0)


@pytest.fixture(scope="session")
def linear_4000():
    return draw("linear", 4000, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria register their outcome here; printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
