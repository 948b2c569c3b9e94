import numpy as np
import pytest

from pergrad.layers import Conv, Dense, Flatten, MaxPool, Network, ReLU


def two_conv_net(seed=0, spatial=(10, 10), groups=1, stride=1, dilation=1, padding=0, pool=True):
    """conv -> relu -> conv -> relu [-> maxpool] -> flatten -> dense."""
    rng = np.random.default_rng(seed)
    n = len(spatial)
    layers = [
        Conv.init(rng, 4, 4, (3,) * n, (stride,) * n, (dilation,) * n, (padding,) * n, groups), ReLU(),
        Conv.init(rng, 4, 8, (2,) * n, groups=groups), ReLU(),
    ]
    if pool:
        layers.append(MaxPool(2, 2))
    feat = Network(tuple(layers)).output_shape((1, 4, *spatial))
    layers += [Flatten(), Dense.init(rng, int(np.prod(feat[1:])), 3)]
    return Network(tuple(layers))


@pytest.fixture
def toy_net():
    return two_conv_net()


@pytest.fixture
def toy_batch():
    return np.random.default_rng(42).standard_normal((4, 4, 10, 10))
