import dataclasses

import numpy as np
import pytest

from sraa.config import RunConfig, override
from sraa.engine import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(tmp_path, **top) -> RunConfig:
    """A run config small enough for sub-second end-to-end runs."""
    cfg = RunConfig(data_dir=str(tmp_path / "data"), out_dir=str(tmp_path / "runs"), **top)
    train = TrainConfig(epochs_base=3, epochs_inc=4, batch_size=4, feature_dim=8,
                        seed=cfg.train.seed)
    data = {**dataclasses.asdict(cfg.data), "images_per_class": 3, "test_images_per_class": 2,
            "image_size": 16}
    return override(cfg, train=dataclasses.asdict(train), data=data)


@pytest.fixture
def tiny(tmp_path):
    return lambda **top: tiny_config(tmp_path, **top)
