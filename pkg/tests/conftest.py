import numpy as np
import pytest

from cirkit.store import make_matrix


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_corpus(rng):
    data = unit_rows(rng, 16, 8).astype(np.float32)
    ids = [f"img_{i:03d}" for i in range(16)]
    return make_matrix(ids, data, normalized=True)
