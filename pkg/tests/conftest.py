import numpy as np
import pytest

from fsaf.config import TrainConfig
from fsaf.data import Dataset, make_synthetic


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return Dataset(make_synthetic(root, 8, image_size=64, seed=3))


def tiny_config(**kw):
    base = dict(image_size=64, backbone_channels=(4, 4, 8, 8, 8), width=6, seed=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
