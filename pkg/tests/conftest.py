import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from brm.mdp import TabularMdp, generate_dataset, preset_mdp, random_mdp
from brm.objective import for_mdp

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def demo():
    """3x2 instance used by the experiments (beta = 0.4)."""
    return preset_mdp("demo", 0.4)


@pytest.fixture(scope="session")
def demo_data(demo):
    return generate_dataset(demo, n=200, seed=1, min_visits=2)


@pytest.fixture(scope="session")
def demo_param(demo, demo_data):
    return for_mdp(demo, demo_data)


@pytest.fixture(scope="session")
def ring():
    return preset_mdp("ring", 0.7)


def one_state(r=1.0, beta=0.5):
    return TabularMdp(np.ones((1, 1, 1)), np.array([[r]]), beta, np.array([1.0]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
