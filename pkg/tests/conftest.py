import numpy as np
import pytest

from sepdiar.embed import ToyEncoder
from sepdiar.mixture import make_toy_pool, synthesize_mixture
from sepdiar.signal import StftConfig

TEST_STFT = StftConfig(window_len=256, hop=64)


@pytest.fixture(scope="session")
def stft_cfg():
    return TEST_STFT


@pytest.fixture(scope="session")
def toy_pool():
    return make_toy_pool(4, 4, seed=0, duration_range_s=(3.0, 6.0))


@pytest.fixture(scope="session")
def toy_mixture(toy_pool):
    return synthesize_mixture(
        toy_pool, 2, max_overlap=0.5, min_len_s=14.0, seed=7, stft_cfg=TEST_STFT
    )


@pytest.fixture(scope="session")
def toy_encoder():
    return ToyEncoder(dim=24, cfg=TEST_STFT)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
