import os

import numpy as np
import pytest

from utils.config import SynthConfig, TafnetConfig, TrainConfig, Variant
from utils.data_synth import generate_dataset


def pytest_collection_modifyitems(config, items):
    if os.environ.get("TAFNET_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set TAFNET_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model_config():
    """Narrowest valid model on 32x32 inputs"""
    return TafnetConfig(width_multiplier=0.0625, input_size=(32, 32), variant=Variant.FULL)


@pytest.fixture
def tiny_synth_config():
    return SynthConfig(image_size=(32, 32), count_min=1, count_max=6, train_size=6, val_size=3, test_size=4, seed=3)


@pytest.fixture
def tiny_dataset(tiny_synth_config):
    return generate_dataset(tiny_synth_config)


@pytest.fixture
def quick_train_config():
    return TrainConfig(lr=1e-3, max_epochs=2, val_start_epoch=1, batch_size=2, seed=5)
