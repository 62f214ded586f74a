"""Layers, networks, parameter initialization, optimizers, and training.

A :class:`Network` is an ordered layer list split by ``head_index`` into a
feature extractor and a final classifier.  The classifier is always a
single affine layer plus softmax (:class:`SoftmaxHead`), which keeps
head-only retraining a convex softmax-regression problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .tensor import (
    GradTape,
    ShapeError,
    Tensor,
    add,
    add_channel_bias,
    add_row_bias,
    backward,
    conv2d,
    cross_entropy,
    get_default_dtype,
    matmul,
    max_pool2d,
    relu,
    reshape,
    softmax,
)

OPTIMIZERS = ("adam", "sgd")
INIT_SCHEMES = ("he", "xavier")


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Base layer: a kind tag, zero or more parameter tensors, a forward."""

    kind = "?"

    def params(self):
        return []

    def hyperparams(self):
        """Kind-specific integer hyperparameters, in checkpoint order."""
        return ()

    def forward(self, x):
        raise NotImplementedError


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim, out_dim):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.weight = Tensor(np.zeros((in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def params(self):
        return [self.weight, self.bias]

    def hyperparams(self):
        return (self.in_dim, self.out_dim)

    def forward(self, x):
        return add_row_bias(matmul(x, self.weight), self.bias)


class Conv(Layer):
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        self.weight = Tensor(
            np.zeros((out_channels, in_channels, kernel, kernel)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def params(self):
        return [self.weight, self.bias]

    def hyperparams(self):
        return (self.in_channels, self.out_channels, self.kernel,
                self.stride, self.padding)

    def forward(self, x):
        return add_channel_bias(
            conv2d(x, self.weight, self.stride, self.padding), self.bias)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return relu(x)


class MaxPool(Layer):
    kind = "max_pool"

    def __init__(self, window, stride):
        self.window = int(window)
        self.stride = int(stride)

    def hyperparams(self):
        return (self.window, self.stride)

    def forward(self, x):
        return max_pool2d(x, self.window, self.stride)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        return reshape(x, (x.shape[0], -1))


class ResidualBlock(Layer):
    """conv -> relu -> conv, plus the identity skip, then relu.

    Stride-1 convolutions with odd kernels and (kernel-1)//2 padding keep
    the output shape equal to the input shape, which the skip-add needs.
    """

    kind = "residual_block"

    def __init__(self, channels, kernel=3):
        if kernel % 2 != 1:
            raise ValueError(f"residual block kernel must be odd, got {kernel}")
        self.channels = int(channels)
        self.kernel = int(kernel)
        self.padding = (kernel - 1) // 2
        shape = (channels, channels, kernel, kernel)
        self.weight1 = Tensor(np.zeros(shape), requires_grad=True)
        self.bias1 = Tensor(np.zeros(channels), requires_grad=True)
        self.weight2 = Tensor(np.zeros(shape), requires_grad=True)
        self.bias2 = Tensor(np.zeros(channels), requires_grad=True)

    def params(self):
        return [self.weight1, self.bias1, self.weight2, self.bias2]

    def hyperparams(self):
        return (self.channels, self.kernel)

    def forward(self, x):
        h = relu(add_channel_bias(
            conv2d(x, self.weight1, 1, self.padding), self.bias1))
        h = add_channel_bias(conv2d(h, self.weight2, 1, self.padding), self.bias2)
        return relu(add(h, x))


class SoftmaxHead(Layer):
    """The final classifier: one dense layer followed by softmax.

    Higher-rank inputs are flattened to (n, d) first, so a head can sit
    directly on image-shaped activations (degenerate empty extractor).
    """

    kind = "softmax_head"

    def __init__(self, in_dim, num_classes):
        self.in_dim = int(in_dim)
        self.num_classes = int(num_classes)
        self.weight = Tensor(np.zeros((in_dim, num_classes)), requires_grad=True)
        self.bias = Tensor(np.zeros(num_classes), requires_grad=True)

    def params(self):
        return [self.weight, self.bias]

    def hyperparams(self):
        return (self.in_dim, self.num_classes)

    def forward(self, x):
        if x.data.ndim != 2:
            x = reshape(x, (x.shape[0], -1))
        return softmax(add_row_bias(matmul(x, self.weight), self.bias))


LAYER_KINDS = {cls.kind: cls for cls in
               (Dense, Conv, ReLU, MaxPool, Flatten, ResidualBlock, SoftmaxHead)}


# ---------------------------------------------------------------------------
# network


class Network:
    """Ordered layers with a head boundary.

    ``layers[:head_index]`` is the feature extractor; ``layers[head_index:]``
    must be exactly one :class:`SoftmaxHead`.
    """

    def __init__(self, layers, head_index):
        layers = list(layers)
        if head_index != len(layers) - 1 or not layers:
            raise ValueError(
                f"head_index must point at the last layer "
                f"({len(layers) - 1}), got {head_index}")
        if not isinstance(layers[-1], SoftmaxHead):
            raise ValueError(
                f"final layer must be a softmax head, got {layers[-1].kind!r}")
        self.layers = layers
        self.head_index = head_index

    @property
    def extractor_layers(self):
        return self.layers[:self.head_index]

    @property
    def head(self):
        return self.layers[self.head_index]

    @property
    def num_classes(self):
        return self.head.num_classes

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward_features(self, x):
        """Run the extractor only (the activation just before the head)."""
        return _run_layers(self.extractor_layers, x, offset=0)

    def forward(self, x):
        feats = self.forward_features(x)
        return _run_layers([self.head], feats, offset=self.head_index)

    def __call__(self, x):
        return self.forward(x)


def _run_layers(layers, x, offset):
    for i, layer in enumerate(layers):
        try:
            x = layer.forward(x)
        except ShapeError as e:
            raise ShapeError(f"layer {offset + i} ({layer.kind}): {e}") from None
    return x


# ---------------------------------------------------------------------------
# initialization


def _init_weight(rng, shape, fan_in, fan_out, scheme, dtype):
    if scheme == "he":
        return (rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    if scheme == "xavier":
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape).astype(dtype)
    raise ValueError(f"unknown init scheme {scheme!r}")


def init_params(network, scheme, seed):
    """Draw all weights per the scheme (biases zero), deterministically.

    He: normal with std sqrt(2/fan_in).  Xavier: uniform in
    +-sqrt(6/(fan_in+fan_out)).  Layers are visited in order, so a given
    seed always produces bitwise-identical parameters.
    """
    rng = np.random.default_rng(seed)
    dtype = get_default_dtype()
    for layer in network.layers:
        if isinstance(layer, (Dense, SoftmaxHead)):
            fi, fo = layer.weight.shape
            layer.weight.data = _init_weight(rng, layer.weight.shape, fi, fo, scheme, dtype)
            layer.bias.data = np.zeros_like(layer.bias.data)
        elif isinstance(layer, Conv):
            f, c, kh, kw = layer.weight.shape
            layer.weight.data = _init_weight(
                rng, layer.weight.shape, c * kh * kw, f * kh * kw, scheme, dtype)
            layer.bias.data = np.zeros_like(layer.bias.data)
        elif isinstance(layer, ResidualBlock):
            for w, b in ((layer.weight1, layer.bias1), (layer.weight2, layer.bias2)):
                f, c, kh, kw = w.shape
                w.data = _init_weight(rng, w.shape, c * kh * kw, f * kh * kw, scheme, dtype)
                b.data = np.zeros_like(b.data)
    return network


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    """Adam with bias-corrected moments (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.step_count)
            v_hat = v / (1 - b2 ** self.step_count)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    """Plain SGD with optional momentum buffer."""

    def __init__(self, params, lr=1e-3, momentum=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.step_count = 0
        self.buf = [np.zeros_like(p.data) for p in self.params] if momentum else None

    def step(self):
        self.step_count += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if self.buf is not None:
                self.buf[i] *= self.momentum
                self.buf[i] += g
                g = self.buf[i]
            p.data -= self.lr * g


def make_optimizer(name, params, lr):
    if name == "adam":
        return Adam(params, lr=lr)
    if name == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# configs and the training loop


@dataclass(kw_only=True)
class TrainConfig:
    epochs: int
    batch_size: int = 128
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    seed: int = 0
    augmentation: bool = True
    init: str = "he"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {INIT_SCHEMES}, got {self.init!r}")


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    accuracy: float


def train(network, dataset, config, augment_policy=None):
    """Minibatch training of all parameters; returns (network, epoch log).

    Shuffling and augmentation are driven by one generator seeded from
    ``config.seed``, so identical inputs give bitwise-identical parameters.
    ``epochs == 0`` returns the network untouched.
    """
    if len(dataset.labels) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.num_classes != network.num_classes:
        raise ValueError(
            f"dataset has {dataset.num_classes} classes but the head emits "
            f"{network.num_classes}")
    if augment_policy is None:
        augment_policy = data_mod.AugmentPolicy(enabled=config.augmentation)
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config.optimizer, network.params(), config.learning_rate)
    n = len(dataset.labels)
    log = []
    for epoch in range(config.epochs):
        loss_sum = 0.0
        correct = 0
        for xb, yb in data_mod.batches(dataset, config.batch_size,
                                       shuffle=True, seed=rng):
            if augment_policy.enabled:
                xb = data_mod.augment_batch(xb, augment_policy, rng)
            with GradTape() as tape:
                probs = network.forward(Tensor(xb))
                loss = cross_entropy(probs, yb)
            backward(tape, loss)
            opt.step()
            loss_sum += float(loss.data) * len(yb)
            correct += int((probs.data.argmax(axis=1) == yb).sum())
        log.append(EpochLog(epoch, loss_sum / n, correct / n))
    return network, log


def _evaluate_with_head(extractor_layers, head_layer, dataset, batch_size=256):
    """Accuracy and mean loss of extractor + head on a dataset.

    Shared by plain evaluation and the feature-then-classifier fast path,
    so both return bitwise-identical numbers by construction.  Argmax ties
    resolve to the lowest class index; no augmentation is ever applied.
    """
    n = len(dataset.labels)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    loss_sum = 0.0
    for xb, yb in data_mod.batches(dataset, batch_size, shuffle=False):
        feats = _run_layers(extractor_layers, Tensor(xb), offset=0)
        probs = head_layer.forward(feats)
        loss = cross_entropy(probs, yb)
        correct += int((probs.data.argmax(axis=1) == yb).sum())
        loss_sum += float(loss.data) * len(yb)
    return correct / n, loss_sum / n


def evaluate(network, dataset, batch_size=256):
    """Fraction of argmax-correct samples and mean cross-entropy."""
    return _evaluate_with_head(
        network.extractor_layers, network.head, dataset, batch_size)
