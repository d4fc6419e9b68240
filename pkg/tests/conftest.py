import numpy as np
import pytest

from rgbxalign.synthbench import SceneConfig, gen_sequence


@pytest.fixture(scope="session")
def small_bundle():
    """128x128 two-layer nir-like bundle shared by fast tests."""
    return gen_sequence(SceneConfig(seed=11, size=128, frames=6, modality="nir-like"))


@pytest.fixture(scope="session")
def thermal_bundle():
    return gen_sequence(SceneConfig(seed=7, size=128, frames=4, modality="thermal-like"))


@pytest.fixture
def rng():
    return np.random.default_rng(99)
