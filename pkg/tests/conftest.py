import os
from pathlib import Path

import numpy as np
import pytest

from maxprop.data import synthetic_dataset
from maxprop.tensor import Rng

TINY_CONFIG = """\
[run]
name = tiny_maxprop
seed = 1

[dataset]
kind = synthetic
synthetic_train = 60
synthetic_test = 30
synthetic_classes = 3
synthetic_channels = 3
synthetic_size = 6
max_shift = 1

[network]
preset = tiny
combiner = maximum

[train]
lr = 0.05
batch_size = 20
epochs = 2
"""


@pytest.fixture
def small_dataset():
    return synthetic_dataset(60, num_classes=3, seed=7, channels=3, size=6)


@pytest.fixture
def tiny_config_path(tmp_path) -> Path:
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


@pytest.fixture
def fashion_mnist_dir():
    root = os.environ.get("FASHION_MNIST_DIR")
    if not root or not Path(root).is_dir():
        pytest.skip("FASHION_MNIST_DIR is not set")
    return Path(root)


def idx_bytes(magic: int, dims, payload: bytes) -> bytes:
    header = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in dims)
    return header + payload


def random_array(seed: int, shape, low=-2.0, high=2.0) -> np.ndarray:
    return Rng(seed).uniform(low, high, shape)
