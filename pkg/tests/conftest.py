"""
测试公共设置与夹具
"""
import os
import sys
import tempfile

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
os.environ.setdefault("GRAFTNET_LOG_DIR", tempfile.mkdtemp(prefix="graftnet_test_logs_"))

import numpy as np
import pytest

from datasets import generate_synthetic, train_test_split
from nn_core import Network, small_convnet


TINY_CLASSES = 3


def tiny_architecture():
    """1×8×8 → conv4 → pool → conv6 → pool → dense3"""
    return small_convnet(input_shape=(1, 8, 8), num_classes=TINY_CLASSES, channels=(4, 6))


def constant_network(value: float, architecture=None) -> Network:
    net = Network(architecture or tiny_architecture(), init="zeros")
    for tensor in net.parameters().values():
        tensor[...] = value
    return net


@pytest.fixture
def architecture():
    return tiny_architecture()


@pytest.fixture
def network(architecture):
    return Network(architecture, seed=0)


@pytest.fixture(scope="session")
def tiny_datasets():
    full = generate_synthetic(TINY_CLASSES, 20, 8, seed=0)
    return train_test_split(full, 0.25, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
