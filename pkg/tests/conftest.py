import numpy as np
import pytest

from mmctta.nn import init_network
from mmctta.stream import init_pairs, make_source_dataset, make_world, pretrain


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net(rng):
    """Random biases keep ReLU pre-activations off the kink at exactly zero."""
    net = init_network(4, 3, rng, hidden=(6, 5), feature_dim=4)
    return net.with_params([p if p.ndim == 2 else 0.3 * rng.standard_normal(p.shape) for p in net.params()])


@pytest.fixture(scope="session")
def tiny_world():
    return make_world(3, points_per_sample=32)


@pytest.fixture(scope="session")
def pretrained(tiny_world):
    """Pretrained pairs and source features for a small world, shared across tests."""
    data = make_source_dataset(tiny_world, 40, seed=3)
    p2, p3 = init_pairs(tiny_world, 3)
    return pretrain(p2, p3, data, epochs=15, lr=0.05, seed=3)
