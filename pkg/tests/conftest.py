import numpy as np
import pytest

from data import Dataset, gen_dataset, gen_orthogonal_dataset
from net import NetworkConfig


@pytest.fixture
def ortho_ds():
    """Eight orthogonal samples in R^64 with norm 8 and alternating labels"""
    ds = gen_orthogonal_dataset(64, 8, seed=3)
    return ds.with_labels(np.array([1.0, -1.0] * 4))


@pytest.fixture
def pair_ds():
    return Dataset(np.array([[1.0], [-1.0]]), np.array([1.0, -1.0]))


@pytest.fixture
def uniform_ds():
    return gen_dataset("uniform", 32, 12, seed=7)


@pytest.fixture
def small_cfg():
    return NetworkConfig(d=64, m=8, gamma=0.5)
