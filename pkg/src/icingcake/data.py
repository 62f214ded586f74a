"""Dataset ingestion, augmentation, batching, and balanced subsets.

Supports the MNIST IDX binary format (big-endian) and the CIFAR-10/100
binary record formats, plus a deterministic procedurally generated digit
set for machines without the real files.  Images are scaled to [0,1] on
load; no further normalization is applied.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import get_default_dtype

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR10_RECORD = 3073   # 1 label byte + 3x32x32 pixels
CIFAR100_RECORD = 3074  # coarse + fine label bytes + 3x32x32 pixels


class DataFormatError(ValueError):
    """Raised when a dataset file does not match its binary format."""


@dataclass
class Dataset:
    """Images (n,c,h,w) in [0,1] with integer labels in [0,num_classes)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.labels) != self.images.shape[0]:
            raise ValueError(
                f"images {self.images.shape} do not pair with "
                f"{len(self.labels)} labels")
        if len(self.labels) < 1:
            raise ValueError("a dataset needs at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(
                f"labels must lie in [0, {self.num_classes}), "
                f"found {self.labels.min()}..{self.labels.max()}")

    def __len__(self):
        return len(self.labels)


@dataclass
class AugmentPolicy:
    """Zero-pad + random-crop and coin-flip horizontal mirroring."""

    pad_crop: int = 4
    horizontal_flip: bool = True
    enabled: bool = True

    def __post_init__(self):
        if self.pad_crop < 0:
            raise ValueError(f"pad_crop must be >= 0, got {self.pad_crop}")


# ---------------------------------------------------------------------------
# MNIST IDX


def _read_exact(f, count, path, what):
    buf = f.read(count)
    if len(buf) < count:
        raise DataFormatError(
            f"{path}: truncated file, expected {count} bytes of {what}, "
            f"got {len(buf)}")
    return buf


def load_mnist(images_path, labels_path):
    """Load an IDX image/label file pair into a 10-class Dataset."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(
            ">IIII", _read_exact(f, 16, images_path, "header"))
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad magic 0x{magic:08x}, "
                f"expected 0x{IDX_IMAGE_MAGIC:08x}")
        raw = _read_exact(f, count * rows * cols, images_path, "pixels")
    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(
            ">II", _read_exact(f, 8, labels_path, "header"))
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, "
                f"expected 0x{IDX_LABEL_MAGIC:08x}")
        labels = np.frombuffer(
            _read_exact(f, label_count, labels_path, "labels"), dtype=np.uint8)
    if label_count != count:
        raise DataFormatError(
            f"count mismatch: {images_path} has {count} images but "
            f"{labels_path} has {label_count} labels")
    if labels.size and labels.max() > 9:
        raise DataFormatError(
            f"{labels_path}: label {labels.max()} out of range [0, 10)")
    dtype = get_default_dtype()
    images = np.frombuffer(raw, dtype=np.uint8).reshape(
        count, 1, rows, cols).astype(dtype) / dtype(255)
    return Dataset(images, labels.astype(np.int64), num_classes=10, name="mnist")


def write_mnist(dataset, images_path, labels_path):
    """Write a dataset back out as an IDX pair (inverse of load_mnist)."""
    n, _, rows, cols = dataset.images.shape
    pixels = np.rint(dataset.images * 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CIFAR binaries


def load_cifar(paths, variant):
    """Load CIFAR-10/100 binary batch files (channel-planar, 32x32 RGB)."""
    if isinstance(paths, (str, bytes)):
        paths = [paths]
    if variant == "cifar10":
        record, num_classes = CIFAR10_RECORD, 10
    elif variant == "cifar100":
        record, num_classes = CIFAR100_RECORD, 100
    else:
        raise ValueError(f"variant must be cifar10 or cifar100, got {variant!r}")
    all_pixels = []
    all_labels = []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % record != 0:
            raise DataFormatError(
                f"{path}: size {len(raw)} is not a positive multiple of the "
                f"{record}-byte {variant} record")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels = arr[:, 1] if variant == "cifar100" else arr[:, 0]
        if labels.max() >= num_classes:
            raise DataFormatError(
                f"{path}: label {labels.max()} out of range [0, {num_classes})")
        all_labels.append(labels.astype(np.int64))
        all_pixels.append(arr[:, record - 3072:])
    dtype = get_default_dtype()
    images = np.concatenate(all_pixels).reshape(
        -1, 3, 32, 32).astype(dtype) / dtype(255)
    return Dataset(images, np.concatenate(all_labels),
                   num_classes=num_classes, name=variant)


def write_cifar(dataset, path, variant, coarse_labels=None):
    """Write a 3x32x32 dataset as a CIFAR binary batch file."""
    pixels = np.rint(dataset.images * 255).astype(np.uint8).reshape(len(dataset), 3072)
    fine = dataset.labels.astype(np.uint8)[:, None]
    if variant == "cifar10":
        records = np.concatenate([fine, pixels], axis=1)
    elif variant == "cifar100":
        if coarse_labels is None:
            coarse_labels = np.zeros(len(dataset), dtype=np.uint8)
        records = np.concatenate(
            [np.asarray(coarse_labels, dtype=np.uint8)[:, None], fine, pixels], axis=1)
    else:
        raise ValueError(f"variant must be cifar10 or cifar100, got {variant!r}")
    with open(path, "wb") as f:
        f.write(records.tobytes())


# ---------------------------------------------------------------------------
# subsetting, batching, augmentation


def subset(dataset, n_per_class, seed):
    """Balanced random subset with exactly n_per_class samples per class."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) < n_per_class:
            raise ValueError(
                f"class {c} has only {len(members)} samples, "
                f"need {n_per_class}")
        picks.append(rng.permutation(members)[:n_per_class])
    idx = np.concatenate(picks)
    return Dataset(dataset.images[idx], dataset.labels[idx],
                   num_classes=dataset.num_classes, name=dataset.name)


def batches(dataset, batch_size, shuffle=False, seed=0):
    """Yield (images, labels) covering every sample exactly once.

    The last batch may be short.  ``seed`` may be an int or an existing
    numpy Generator (so a caller can thread one stream through epochs).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset.labels)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        sel = order[start:start + batch_size]
        yield dataset.images[sel], dataset.labels[sel]


def augment_batch(batch, policy, rng):
    """Pad-crop and coin-flip mirror a (b,c,h,w) batch of images.

    Disabled policies return the batch untouched.  All randomness comes
    from ``rng``, so training remains reproducible under a fixed seed.
    """
    if not policy.enabled:
        return batch
    b, _, h, w = batch.shape
    out = batch
    pad = policy.pad_crop
    if pad > 0:
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        offs = rng.integers(0, 2 * pad + 1, size=(b, 2))
        out = np.empty_like(batch)
        for i in range(b):
            dy, dx = offs[i]
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    if policy.horizontal_flip:
        flips = rng.random(b) < 0.5
        if pad == 0:
            out = out.copy()
        out[flips] = out[flips, :, :, ::-1]
    return out


# ---------------------------------------------------------------------------
# procedural digit set (desk-scale stand-in when MNIST files are absent)

_GLYPHS = [
    "#####|#...#|#...#|#...#|#...#|#...#|#####",  # 0
    "..#..|.##..|..#..|..#..|..#..|..#..|.###.",  # 1
    "#####|....#|....#|#####|#....|#....|#####",  # 2
    "#####|....#|....#|.####|....#|....#|#####",  # 3
    "#...#|#...#|#...#|#####|....#|....#|....#",  # 4
    "#####|#....|#....|#####|....#|....#|#####",  # 5
    "#####|#....|#....|#####|#...#|#...#|#####",  # 6
    "#####|....#|...#.|..#..|..#..|..#..|..#..",  # 7
    "#####|#...#|#...#|#####|#...#|#...#|#####",  # 8
    "#####|#...#|#...#|#####|....#|....#|#####",  # 9
]


def _glyph_array(digit):
    rows = _GLYPHS[digit].split("|")
    return np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows])


def synthetic_digits(n_per_class, seed=0, image_size=28, noise=0.35):
    """Generate a balanced 10-class digit dataset of rendered glyphs.

    Each sample is a 7x5 digit glyph pushed through a random affine map
    (scale, rotation, translation), bilinearly sampled onto an
    image_size**2 canvas, intensity-jittered, and buried in Gaussian
    noise.  Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    n = 10 * n_per_class
    labels = np.repeat(np.arange(10), n_per_class)
    glyphs = np.stack([_glyph_array(d) for d in labels])  # (n, 7, 5)
    gp = np.pad(glyphs, ((0, 0), (1, 1), (1, 1)))  # zero border for sampling

    scale = rng.uniform(2.2, 3.2, size=n)
    theta = rng.uniform(-0.4, 0.4, size=n)
    tx = rng.uniform(-4.0, 4.0, size=n)
    ty = rng.uniform(-4.0, 4.0, size=n)
    amp = rng.uniform(0.55, 1.0, size=n)

    # canvas coordinates relative to the image center
    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    yc = ys - (image_size - 1) / 2
    xc = xs - (image_size - 1) / 2

    cos = np.cos(theta)[:, None, None]
    sin = np.sin(theta)[:, None, None]
    s = scale[:, None, None]
    # inverse map: canvas -> glyph coordinates (glyph center at (4, 3) in gp)
    gy = ((cos * (yc - ty[:, None, None]) + sin * (xc - tx[:, None, None])) / s) + 4.0
    gx = ((-sin * (yc - ty[:, None, None]) + cos * (xc - tx[:, None, None])) / s) + 3.0

    gy = np.clip(gy, 0.0, gp.shape[1] - 1.001)
    gx = np.clip(gx, 0.0, gp.shape[2] - 1.001)
    y0 = gy.astype(np.int64)
    x0 = gx.astype(np.int64)
    fy = gy - y0
    fx = gx - x0
    bidx = np.arange(n)[:, None, None]
    val = (gp[bidx, y0, x0] * (1 - fy) * (1 - fx)
           + gp[bidx, y0 + 1, x0] * fy * (1 - fx)
           + gp[bidx, y0, x0 + 1] * (1 - fy) * fx
           + gp[bidx, y0 + 1, x0 + 1] * fy * fx)
    val = val * amp[:, None, None]
    val = val + rng.normal(0.0, noise, size=val.shape)
    images = np.clip(val, 0.0, 1.0).astype(get_default_dtype())[:, None, :, :]

    perm = rng.permutation(n)
    return Dataset(images[perm], labels[perm], num_classes=10, name="synthetic")
