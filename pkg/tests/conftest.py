"""Shared builders for randomized networks and small datasets."""

import numpy as np

from icingcake.data import Dataset
from icingcake.network import (
    Conv,
    Dense,
    Flatten,
    MaxPool,
    Network,
    ReLU,
    ResidualBlock,
    SoftmaxHead,
    init_params,
)


def random_dataset(rng, n=24, c=1, h=8, w=8, num_classes=3, balanced=False):
    """A small image dataset with uniform-random pixels in [0,1]."""
    images = rng.random(size=(n, c, h, w)).astype(np.float32)
    if balanced:
        labels = np.tile(np.arange(num_classes), n // num_classes + 1)[:n]
    else:
        labels = rng.integers(0, num_classes, size=n)
    return Dataset(images, labels, num_classes=num_classes, name="random")


def random_network(rng, c=1, h=8, w=8, num_classes=3):
    """A randomly chosen small architecture, freshly initialized."""
    kind = rng.integers(0, 3)
    if kind == 0:  # mlp
        hidden = int(rng.integers(4, 12))
        layers = [Flatten(), Dense(c * h * w, hidden), ReLU(),
                  SoftmaxHead(hidden, num_classes)]
    elif kind == 1:  # small cnn
        ch = int(rng.integers(2, 5))
        layers = [Conv(c, ch, 3, stride=1, padding=1), ReLU(), MaxPool(2, 2),
                  Flatten(), SoftmaxHead(ch * (h // 2) * (w // 2), num_classes)]
    else:  # residual
        ch = int(rng.integers(2, 4))
        layers = [Conv(c, ch, 3, stride=1, padding=1), ReLU(),
                  ResidualBlock(ch, 3), MaxPool(2, 2), Flatten(),
                  SoftmaxHead(ch * (h // 2) * (w // 2), num_classes)]
    net = Network(layers, len(layers) - 1)
    scheme = "he" if rng.integers(0, 2) == 0 else "xavier"
    return init_params(net, scheme, int(rng.integers(0, 2 ** 31)))


def clone_params(network):
    return [p.data.copy() for p in network.params()]


def params_equal(a, b):
    return len(a) == len(b) and all(
        np.array_equal(x, y) for x, y in zip(a, b))
