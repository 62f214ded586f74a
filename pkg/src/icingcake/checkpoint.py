"""Binary network checkpoints (magic "ICK1", little-endian).

Layout: magic, version u32, head_index u32, layer count u32, then per
layer: kind tag u8, kind-specific u32 hyperparameters, parameter count
u32, and each parameter as rank u32 + dims (u32 each) + raw f32 values,
row-major.
"""

from __future__ import annotations

import struct

import numpy as np

from .network import LAYER_KINDS, Network
from .tensor import get_default_dtype

MAGIC = b"ICK1"
VERSION = 1

_KIND_TAGS = {
    "dense": 1,
    "conv": 2,
    "relu": 3,
    "max_pool": 4,
    "flatten": 5,
    "residual_block": 6,
    "softmax_head": 7,
}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}

# number of u32 hyperparameters each kind stores
_HP_COUNTS = {
    "dense": 2,
    "conv": 5,
    "relu": 0,
    "max_pool": 2,
    "flatten": 0,
    "residual_block": 2,
    "softmax_head": 2,
}


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be read back."""


def save_checkpoint(network, path):
    """Serialize all layers, hyperparameters, and parameters to a file."""
    parts = [MAGIC, struct.pack("<III", VERSION, network.head_index,
                                len(network.layers))]
    for layer in network.layers:
        parts.append(struct.pack("<B", _KIND_TAGS[layer.kind]))
        for hp in layer.hyperparams():
            parts.append(struct.pack("<I", hp))
        params = layer.params()
        parts.append(struct.pack("<I", len(params)))
        for p in params:
            arr = np.ascontiguousarray(p.data, dtype="<f4")
            parts.append(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                parts.append(struct.pack("<I", dim))
            parts.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"{self.path}: truncated file while reading {what} "
                f"(need {n} bytes at offset {self.pos}, "
                f"have {len(self.raw) - self.pos})")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]


def load_checkpoint(path):
    """Rebuild a Network from an ICK1 file, bitwise-faithful in float32."""
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(
            f"{path}: version mismatch, file has {version}, "
            f"reader supports {VERSION}")
    head_index = r.u32("head_index")
    n_layers = r.u32("layer count")
    dtype = get_default_dtype()
    layers = []
    for i in range(n_layers):
        tag = r.u8(f"layer {i} kind")
        kind = _TAG_KINDS.get(tag)
        if kind is None:
            raise CheckpointError(f"{path}: unknown layer kind tag {tag}")
        hps = [r.u32(f"layer {i} hyperparam") for _ in range(_HP_COUNTS[kind])]
        layer = LAYER_KINDS[kind](*hps)
        n_params = r.u32(f"layer {i} parameter count")
        params = layer.params()
        if n_params != len(params):
            raise CheckpointError(
                f"{path}: layer {i} ({kind}) stores {n_params} parameters, "
                f"expected {len(params)}")
        for p in params:
            rank = r.u32("parameter rank")
            dims = tuple(r.u32("parameter dim") for _ in range(rank))
            count = int(np.prod(dims)) if dims else 1
            buf = r.take(4 * count, "parameter values")
            arr = np.frombuffer(buf, dtype="<f4").reshape(dims)
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"{path}: layer {i} ({kind}) parameter shape {arr.shape} "
                    f"does not match expected {p.data.shape}")
            p.data = arr.astype(dtype)
        layers.append(layer)
    return Network(layers, head_index)
