import numpy as np
import pytest

from tsbdlab.nn import Activation, Batch, Layer, Network
from tsbdlab.training import init_network


@pytest.fixture
def tiny_net():
    """Seeded 3-4-2 network used by several numeric tests."""
    return init_network(20240801, [3, 4, 2])


def random_net(rng: np.random.Generator, max_params: int = 500) -> Network:
    """Random small architecture with Glorot-ish weights; <= max_params."""
    while True:
        depth = rng.integers(1, 4)
        sizes = [int(rng.integers(2, 7))]
        for _ in range(depth):
            sizes.append(int(rng.integers(2, 9)))
        n_params = sum(a * b + b for a, b in zip(sizes, sizes[1:]))
        if n_params <= max_params:
            break
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        w = rng.normal(0, 0.8, size=(fan_out, fan_in)).astype(np.float32)
        b = rng.normal(0, 0.3, size=fan_out).astype(np.float32)
        act = Activation.IDENTITY if i == depth - 1 else Activation.RELU
        layers.append(Layer(w, b, act))
    return Network(layers)


def random_batch(rng: np.random.Generator, net: Network, n: int | None = None) -> Batch:
    n = n or int(rng.integers(2, 9))
    x = rng.uniform(-1.5, 1.5, size=(n, net.input_dim)).astype(np.float32)
    y = rng.integers(0, net.num_classes, size=n)
    return Batch(x, y)
