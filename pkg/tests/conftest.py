"""
Shared fixtures: a miniature model configuration and seeded synthetic images.

Long toy-training runs are marked slow and only run with --runslow.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import tensor as T  # noqa: E402
from corpus import SyntheticCorpus  # noqa: E402
from models import CompressionModel, ModelConfig, TrainConfig  # noqa: E402

TINY = dict(ae_channels=8, latent_channels=4, hyper_channels=4, d_model=12, heads=2,
            hyper_depth=1, ffn_ratio=2, k=32, h=3)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the toy-training acceptance runs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long toy-training run (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


# =============================================================================
# Fixtures
# =============================================================================

@pytest.fixture
def seed():
    """Set random seed for reproducibility."""
    np.random.seed(42)
    yield
    np.random.seed(None)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    """Factory for miniature ModelConfigs; keyword arguments override the defaults."""
    def make(**overrides):
        return ModelConfig(**{**TINY, **overrides})
    return make


@pytest.fixture
def train_config():
    def make(**overrides):
        base = dict(steps=2, batch_size=1, patch_size=64, log_every=1, seed=0)
        return TrainConfig(**{**base, **overrides})
    return make


@pytest.fixture
def tiny_model(tiny_config):
    with T.precision("float64"):
        return CompressionModel(tiny_config(), seed=0).eval()


@pytest.fixture
def image():
    """64x64 blob texture in [0, 1]."""
    return SyntheticCorpus(64).image(np.random.default_rng(3), kind="blobs")


@pytest.fixture
def images():
    return SyntheticCorpus(64).held_out(3, seed=11)
