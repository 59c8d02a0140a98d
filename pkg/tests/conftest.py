import numpy as np
import pytest

from hetefedrec.config import ExperimentConfig
from hetefedrec.dataset import InteractionDataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    """Small, fast config used by orchestration tests."""
    return ExperimentConfig(synth_users=40, synth_items=30, epochs=2, round_size=16, kd_k=10)


@pytest.fixture
def five_clients():
    """Five users over eight items; tiers 0,0,1,1,2 under the default quantiles."""
    train = [[0, 1], [2, 3], [0, 4, 5], [1, 2, 6], [0, 3, 5, 6, 7]]
    test = [[2], [4], [7], [3], [1]]
    return InteractionDataset.from_lists(5, 8, train, test)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
