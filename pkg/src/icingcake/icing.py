"""Post-learning head retraining ("icing on the cake").

After ordinary training: extract the activations just before the final
classifier into a :class:`FeatureBank`, retrain only that classifier on
the bank (a convex softmax regression), and put it back.  The extractor
is never touched; a parameter digest guards against stale banks.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .network import (
    INIT_SCHEMES,
    OPTIMIZERS,
    EpochLog,
    GradTape,
    Network,
    SoftmaxHead,
    Tensor,
    _evaluate_with_head,
    _init_weight,
    backward,
    cross_entropy,
    make_optimizer,
)
from .tensor import ShapeError, get_default_dtype

BANK_MAGIC = b"ICKF"
BANK_VERSION = 1


class BankFormatError(ValueError):
    """Raised when a feature-bank file does not match its format."""


def extractor_digest(network):
    """32-byte digest of every extractor parameter (shape + raw bytes)."""
    h = hashlib.sha256()
    for layer in network.extractor_layers:
        for p in layer.params():
            h.update(repr(p.data.shape).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.digest()


@dataclass
class FeatureBank:
    """Penultimate activations plus labels, keyed to their extractor."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    source_hash: bytes

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.labels) != self.features.shape[0]:
            raise ValueError(
                f"features {self.features.shape} do not pair with "
                f"{len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)


@dataclass(kw_only=True)
class IcingConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 128
    head_init: str = "fresh"
    init_scheme: str = "xavier"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.head_init not in ("fresh", "warm"):
            raise ValueError(f"head_init must be fresh or warm, got {self.head_init!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"init_scheme must be one of {INIT_SCHEMES}")


@dataclass
class Head:
    """A final classifier's parameters: weight (d,k) and bias (k,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(
                f"head weight {self.weight.shape} does not pair with "
                f"bias {self.bias.shape}")


def head_of(network):
    """Copy a network's current final classifier out as a Head."""
    layer = network.head
    return Head(layer.weight.data.copy(), layer.bias.data.copy())


def _head_layer_from(head):
    d, k = head.weight.shape
    layer = SoftmaxHead(d, k)
    layer.weight.data = np.asarray(head.weight, dtype=get_default_dtype()).copy()
    layer.bias.data = np.asarray(head.bias, dtype=get_default_dtype()).copy()
    return layer


def extract_features(network, dataset, batch_size=256):
    """One inference pass of the extractor over the dataset, un-augmented.

    Uses the identical forward code path as full evaluation, truncated at
    the head boundary, so repeated extraction is bitwise-reproducible.
    """
    chunks = []
    label_chunks = []
    for xb, yb in data_mod.batches(dataset, batch_size, shuffle=False):
        feats = network.forward_features(Tensor(xb)).data
        if feats.ndim != 2:
            # mirror the head's flattening so the bank rows are what the
            # retrained classifier will actually see
            feats = feats.reshape(feats.shape[0], -1)
        chunks.append(feats)
        label_chunks.append(yb)
    return FeatureBank(
        features=np.concatenate(chunks),
        labels=np.concatenate(label_chunks).astype(np.int64),
        num_classes=dataset.num_classes,
        source_hash=extractor_digest(network))


def retrain_head(bank, num_classes, config, warm_head=None):
    """Fit a fresh (or warm-started) classifier to a feature bank.

    Minimizes softmax cross-entropy over (features, labels) by minibatch
    steps; the extractor is not an input, so it cannot be modified.
    Returns (Head, per-epoch log).
    """
    if len(bank) == 0:
        raise ValueError("cannot retrain on an empty feature bank")
    if bank.num_classes != num_classes:
        raise ValueError(
            f"bank was built for {bank.num_classes} classes, asked for {num_classes}")
    if bank.labels.max() >= num_classes:
        raise ValueError(
            f"bank label {bank.labels.max()} out of range [0, {num_classes})")
    d = bank.features.shape[1]
    rng = np.random.default_rng(config.seed)
    layer = SoftmaxHead(d, num_classes)
    if config.head_init == "warm":
        if warm_head is None:
            raise ValueError("head_init='warm' needs a warm_head to start from")
        if warm_head.weight.shape != (d, num_classes):
            raise ValueError(
                f"warm head weight {warm_head.weight.shape} does not match "
                f"features ({d}) x classes ({num_classes})")
        layer.weight.data = np.asarray(
            warm_head.weight, dtype=get_default_dtype()).copy()
        layer.bias.data = np.asarray(
            warm_head.bias, dtype=get_default_dtype()).copy()
    else:
        dtype = get_default_dtype()
        layer.weight.data = _init_weight(
            rng, (d, num_classes), d, num_classes, config.init_scheme, dtype)
        layer.bias.data = np.zeros(num_classes, dtype=dtype)

    opt = make_optimizer(config.optimizer, layer.params(), config.learning_rate)
    n = len(bank)
    log = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            xb, yb = bank.features[sel], bank.labels[sel]
            with GradTape() as tape:
                probs = layer.forward(Tensor(xb))
                loss = cross_entropy(probs, yb)
            backward(tape, loss)
            opt.step()
            loss_sum += float(loss.data) * len(yb)
            correct += int((probs.data.argmax(axis=1) == yb).sum())
        log.append(EpochLog(epoch, loss_sum / n, correct / n))
    return Head(layer.weight.data.copy(), layer.bias.data.copy()), log


def head_loss_on_bank(head, bank, batch_size=256):
    """Mean cross-entropy of a head over a feature bank (no updates)."""
    layer = _head_layer_from(head)
    n = len(bank)
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        xb = bank.features[start:start + batch_size]
        yb = bank.labels[start:start + batch_size]
        probs = layer.forward(Tensor(xb))
        loss_sum += float(cross_entropy(probs, yb).data) * len(yb)
    return loss_sum / n


def swap_head(network, head):
    """A network with the final classifier replaced, extractor shared.

    Extractor layers are carried over by reference, so their parameters
    are bitwise those of the input network.
    """
    old = network.head
    if head.weight.shape != old.weight.shape:
        raise ShapeError(
            f"head weight {head.weight.shape} does not fit the head slot "
            f"{old.weight.data.shape}")
    layers = network.extractor_layers + [_head_layer_from(head)]
    return Network(layers, network.head_index)


def evaluate_fast_path(network, head, dataset, batch_size=256):
    """Evaluate by extracting features and applying ``head`` directly.

    Equivalent to swapping the head back in and evaluating the rebuilt
    network; both routes run the same code, so the numbers are identical.
    """
    old = network.head
    if head.weight.shape != old.weight.data.shape:
        raise ShapeError(
            f"head weight {head.weight.shape} does not fit the head slot "
            f"{old.weight.data.shape}")
    return _evaluate_with_head(
        network.extractor_layers, _head_layer_from(head), dataset, batch_size)


def apply_icing(network, train_set, config, warm_head=None):
    """Extract features, retrain the classifier, and put it back.

    Returns (retrained network, feature bank, retraining log).  The
    extractor digest is checked before and after; any drift is a bug and
    raises.
    """
    digest_before = extractor_digest(network)
    bank = extract_features(network, train_set)
    if config.head_init == "warm" and warm_head is None:
        warm_head = head_of(network)
    head, log = retrain_head(bank, train_set.num_classes, config, warm_head=warm_head)
    swapped = swap_head(network, head)
    if extractor_digest(swapped) != digest_before:
        raise RuntimeError("extractor parameters changed during head retraining")
    return swapped, bank, log


# ---------------------------------------------------------------------------
# feature-bank file format


def save_feature_bank(bank, path):
    """Write a bank as ICKF: counts, extractor digest, f32 rows, u32 labels."""
    feats = np.ascontiguousarray(bank.features, dtype="<f4")
    labels = np.ascontiguousarray(bank.labels, dtype="<u4")
    n, d = feats.shape
    with open(path, "wb") as f:
        f.write(BANK_MAGIC)
        f.write(struct.pack("<IIII", BANK_VERSION, n, d, bank.num_classes))
        f.write(bank.source_hash)
        f.write(feats.tobytes())
        f.write(labels.tobytes())


def load_feature_bank(path):
    """Read an ICKF file back into a FeatureBank."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != BANK_MAGIC:
        raise BankFormatError(
            f"{path}: bad magic {raw[:4]!r}, expected {BANK_MAGIC!r}")
    if len(raw) < 20 + 32:
        raise BankFormatError(f"{path}: truncated header")
    version, n, d, k = struct.unpack("<IIII", raw[4:20])
    if version != BANK_VERSION:
        raise BankFormatError(
            f"{path}: version mismatch, file has {version}, "
            f"reader supports {BANK_VERSION}")
    digest = raw[20:52]
    need = 52 + 4 * n * d + 4 * n
    if len(raw) < need:
        raise BankFormatError(
            f"{path}: truncated file, expected {need} bytes, got {len(raw)}")
    feats = np.frombuffer(raw[52:52 + 4 * n * d], dtype="<f4").reshape(n, d)
    labels = np.frombuffer(raw[52 + 4 * n * d:need], dtype="<u4").astype(np.int64)
    return FeatureBank(
        features=feats.astype(get_default_dtype()),
        labels=labels, num_classes=k, source_hash=digest)
