import numpy as np
import pytest
from hypothesis import settings

from cinetrack.phantom import PhantomConfig, default_distractor, generate
from cinetrack.pipeline import run

settings.register_profile("cinetrack", deadline=None, max_examples=60)
settings.load_profile("cinetrack")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_phantom():
    cfg = PhantomConfig()
    seq, gt = generate(cfg)
    return cfg, seq, gt


@pytest.fixture(scope="session")
def default_run(default_phantom):
    cfg, seq, gt = default_phantom
    return run(seq, cfg.init_box())


@pytest.fixture(scope="session")
def distractor_phantom():
    cfg = PhantomConfig(distractor=default_distractor(), blank_frames=(20, 25))
    seq, gt = generate(cfg)
    return cfg, seq, gt


@pytest.fixture(scope="session")
def static_phantom():
    cfg = PhantomConfig(pattern="static")
    seq, gt = generate(cfg)
    return cfg, seq, gt


def textured(shape, sigma, seed):
    """Smooth random texture in [0, 1]."""
    from cinetrack.preprocess import smooth_array

    r = np.random.default_rng(seed).random(shape)
    t = smooth_array(r, sigma)
    t -= t.min()
    return t / t.max()
