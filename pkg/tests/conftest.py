import numpy as np
import pytest

from pathlm.model import LmConfig, init_params


@pytest.fixture(scope="session")
def tiny_cfg():
    # under 5k parameters; used by gradcheck and most unit tests
    return LmConfig(vocab_size=12, seq_len=12, n_blocks=2, hidden_dim=8, n_heads=2, seed=3)


@pytest.fixture(scope="session")
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
