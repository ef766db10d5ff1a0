import numpy as np
import pytest

from xyz_scgan.imaging import Image, save_image, synthetic_corpus
from xyz_scgan.training import TrainConfig

TINY_TRAIN = dict(
    scale=2,
    batch_size=2,
    crop_size=32,
    n_sc_blocks=1,
    base_channels=8,
    pool_rate=4,
    d_channels=(8, 16),
    perceptual_channels=(4, 8),
    perceptual_tap=2,
    dtype='float64',
    max_iterations=1,
    log_wall_time=False,
    log_every=1,
)

TINY_CONFIG_TEXT = """
# desk-scale smoke run
scale = 2
batch_size = 2
crop_size = 32
n_sc_blocks = 1
base_channels = 8
pool_rate = 4
d_channels = 8,16
perceptual_channels = 4,8
perceptual_tap = 2
max_iterations = 1
log_wall_time = false
dtype = float64
"""


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    def make(**kwargs):
        return TrainConfig(**dict(TINY_TRAIN, **kwargs))
    return make


@pytest.fixture
def small_corpus():
    return synthetic_corpus(4, size=48, seed=7)


@pytest.fixture
def random_image(rng):
    def make(h, w):
        return Image(rng.random((h, w, 3)))
    return make


@pytest.fixture
def image_dir(tmp_path):
    """Directory of four 64x64 synthetic PNGs."""
    d = tmp_path / 'images'
    d.mkdir()
    for name, img in synthetic_corpus(4, size=64, seed=3):
        save_image(img, d / f'{name}.png')
    return d


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / 'tiny.cfg'
    path.write_text(TINY_CONFIG_TEXT)
    return path
