import numpy as np
import pytest

from ringfed.federation import TrainConfig
from ringfed.synthdata import TaskSpec, build_scenario

TINY_TASK = TaskSpec(volume_extent=(24, 24), large_radius=(2.5, 4.0))
TINY_TRAIN = TrainConfig(patch_size=12, batch_size=4, patches_per_subepoch=8, subepochs=1,
                         volumes_per_subepoch=2, channels=(2, 2), fused=(4,), eval_batch=8)


@pytest.fixture(scope="session")
def tiny_train():
    return TINY_TRAIN


@pytest.fixture(scope="session")
def seven_centers():
    """Seven centers of two small volumes each, for structural checks."""
    return build_scenario(TINY_TASK, 7, 2, 2, 2, master_seed=1)


@pytest.fixture(scope="session")
def two_centers():
    return build_scenario(TINY_TASK, 2, 3, 2, 3, master_seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_VERDICTS: list[str] = []


def record_verdict(line: str) -> None:
    _VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
