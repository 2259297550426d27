import numpy as np
import pytest

from vopd_lab import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """A run small enough for unit tests (a fraction of a second)."""
    return TrainConfig(vocab_size=8, prompt_count=4, max_len=4, batch_size=8, steps=20,
                       variance_probe_every=5, variance_probe_samples=16)


def random_pair(rng, V):
    return rng.dirichlet(np.ones(V)), rng.dirichlet(np.ones(V))
