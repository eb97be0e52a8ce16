import numpy as np
import pytest

from storyspace_inputs import INetConfig
from storyspace_tensor import set_precision


@pytest.fixture(autouse=True)
def f64_mode():
    set_precision("f64")
    yield
    set_precision("f64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_config():
    """N=3, D=8, V=7; one slot hidden from epoch 0, two from epoch 10."""
    return INetConfig(n_slots=3, feature_dim=8, vocab_size=7, max_len=6, alpha=0, beta=10)


@pytest.fixture
def make_story():
    """Random (features, encoded sentences) pairs; sentences end in EOS."""

    def build(rng, n_slots=3, feature_dim=8, vocab_size=7, max_words=3):
        features = rng.normal(size=(n_slots, feature_dim))
        rows = []
        for _ in range(n_slots):
            words = rng.integers(4, vocab_size, size=int(rng.integers(1, max_words + 1)))
            rows.append([int(w) for w in words] + [2])
        return features, rows

    return build
