import numpy as np
import pytest

from cdl.network import FeatureBatch, TrainConfig
from registration.transform import AffineParams, volume_center_mm
from tools.synthetic import default_phantom_spec, drift_preset, make_pair
from utils.volume_io import ImageVolume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_volume(rng):
    return ImageVolume(rng.random((8, 9, 10)), spacing=(1.0, 1.5, 2.0), normalized=True)


@pytest.fixture
def small_cfg():
    return TrainConfig(alpha=0.5, beta=0.01, rng_seed=7, reg_normalization="sum")


@pytest.fixture
def correlated_batch(rng):
    """目标 = 源的单调重映射 + 小噪声"""
    x = rng.random((400, 3))
    return FeatureBatch(source=x, target=np.sqrt(x) + 0.01 * rng.normal(size=x.shape))


@pytest.fixture(scope="session")
def phantom_spec():
    return default_phantom_spec(5, dims=(20, 20, 20))


@pytest.fixture(scope="session")
def aligned_pair(phantom_spec):
    center = volume_center_mm(phantom_spec)
    return make_pair(phantom_spec, drift_preset("t1-t2"), AffineParams.identity(center, mode="rigid"), drift_seed=11)
