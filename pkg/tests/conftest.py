import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gpvl.promptgen import build_vocabulary, scene_corpus
from gpvl.scene import generate_dataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def scenes():
    return generate_dataset(12, seed=3)


@pytest.fixture(scope="session")
def vocab(scenes):
    return build_vocabulary(scene_corpus(scenes))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
