import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from csgparse.datagen import build_vocabulary

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def vocab2d():
    return build_vocabulary("2d")


@pytest.fixture(scope="session")
def vocab3d():
    return build_vocabulary("3d")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LOG = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE_LOG, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LOG, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
