import numpy as np
import pytest
import torch

from depthseg.data.pipeline import canonical_stats_from_image, normalize_sample
from depthseg.data.synthetic import make_synthetic_corpus
from depthseg.schemas.config_schema import GuidedConfig, NetworkConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks (deselect with '-m \"not slow\"')")


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def corpus():
    """20 synthetic 64×64 cases with vessels."""
    return make_synthetic_corpus(20, resolution=64, seed=0)


def _normalized(cases, with_guide):
    samples = [case.seg_sample() if with_guide else case.depth_sample() for case in cases]
    stats = canonical_stats_from_image(samples[0].image)
    return [normalize_sample(s, stats) for s in samples]


@pytest.fixture
def small_depth_samples():
    """Two normalized 32×32 depth pairs."""
    return _normalized(make_synthetic_corpus(2, resolution=32, seed=1), with_guide=False)


@pytest.fixture
def small_seg_samples():
    """Two normalized 32×32 samples with labels and a depth guide."""
    return _normalized(make_synthetic_corpus(2, resolution=32, seed=2), with_guide=True)


@pytest.fixture
def tiny_network():
    return NetworkConfig(input_resolution=32, base_filters=8, encoder_levels=5, dropout_levels=0, block_kind="dri")


@pytest.fixture
def tiny_guided():
    return GuidedConfig(guide="depth", main_levels=5, guide_levels=4)


@pytest.fixture
def full_depth_network():
    """Eight-level 256×256 architecture with a narrow base, for introspection only."""
    return NetworkConfig(input_resolution=256, base_filters=8, encoder_levels=8, dropout_levels=3, block_kind="dri")
