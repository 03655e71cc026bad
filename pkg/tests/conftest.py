import os

import pytest
import torch

from disentangan.config import TrainConfig
from disentangan.data import synth_factors


def pytest_collection_modifyitems(config, items):
    if os.environ.get("DISENTANGAN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow suite; set DISENTANGAN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_config():
    """32 px, narrow networks: a training step takes a few tens of milliseconds."""
    return TrainConfig(img_size=32, width_divisor=8, batch_size=8, iterations=10, log_every=1,
                       snapshot_every=0, seed=3)


@pytest.fixture(scope="session")
def synth32():
    return synth_factors(img_size=32)


@pytest.fixture
def torch_rng():
    return torch.Generator().manual_seed(1234)
