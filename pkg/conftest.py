import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from rebalance.models import EmbeddingDataset, OptimConfig, SyntheticSpec
from rebalance.services.synthlab import generate_synthetic


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: synthetic reproduction runs (deselect with -m 'not slow')")


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for key in ("REBALANCE_SEED", "REBALANCE_LOG_LEVEL", "REBALANCE_JOBS", "REBALANCE_OUT"):
        monkeypatch.delenv(key, raising=False)


def make_grouped(sizes, d=2, seed=0, num_spurious=2):
    """Dataset with ``sizes[g]`` rows in group g, groups laid out class-major."""
    rng = np.random.default_rng(seed)
    labels, spurious = [], []
    for g, size in enumerate(sizes):
        labels += [g // num_spurious] * size
        spurious += [g % num_spurious] * size
    n = len(labels)
    return EmbeddingDataset(
        features=rng.normal(size=(n, d)),
        class_labels=np.array(labels),
        spurious_labels=np.array(spurious),
        num_classes=len(sizes) // num_spurious,
        num_spurious=num_spurious,
        name="grouped",
    )


@pytest.fixture
def separable():
    """Two classes split by the sign of the first coordinate with margin 1."""
    rng = np.random.default_rng(3)
    n = 400
    y = rng.integers(0, 2, n)
    x = rng.normal(size=(n, 3))
    x[:, 0] = (2 * y - 1) * (1.0 + np.abs(x[:, 0]))
    spurious = (rng.random(n) < 0.3).astype(int)
    return EmbeddingDataset(x, y, spurious, num_classes=2, num_spurious=2, name="separable")


@pytest.fixture
def small_synthetic():
    return generate_synthetic(SyntheticSpec(n=2000, d=6, minority_rate=0.1, spurious_magnitude=2.0, seed=1))


@pytest.fixture
def quick_config():
    return OptimConfig(lr0=0.1, schedule="constant", weight_decay=0.0, total_steps=60, batch_size=32, seed=0)
