"""Seeded multi-trial experiment runner.

Each trial trains a freshly initialized network, measures test accuracy,
applies the head-retraining procedure, measures again, and checkpoints
both networks.  Trial i uses seed base_seed + i; everything except wall
times is deterministic given the config.
"""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass, field

from . import data as data_mod
from .checkpoint import save_checkpoint
from .icing import IcingConfig, apply_icing, evaluate_fast_path, head_of
from .network import (
    Conv,
    Dense,
    Flatten,
    MaxPool,
    Network,
    ReLU,
    ResidualBlock,
    SoftmaxHead,
    TrainConfig,
    evaluate,
    init_params,
    train,
)
from .reports import TrialReport, emit_report, summarize


class ExperimentError(RuntimeError):
    """A trial failed; the message carries the trial index and cause."""


@dataclass(kw_only=True)
class ExperimentConfig:
    label: str = "experiment"
    dataset: str = "synthetic"
    trials: int = 10
    seed: int = 0
    out_dir: str = "runs/experiment"
    arch: str = "cnn"
    cnn_channels: tuple = (16, 32)
    mlp_hidden: int = 64
    resnet_width: int = 16
    subset_per_class: int = 0  # 0 = use the full training set
    # file paths (mnist/cifar variants)
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_files: tuple = ()
    test_files: tuple = ()
    # synthetic generation
    synth_train_per_class: int = 500
    synth_test_per_class: int = 200
    data_seed: int = 0
    # augmentation policy used when train.augmentation is on
    augment_pad: int = 4
    augment_flip: bool = True
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=3))
    icing: IcingConfig = field(default_factory=IcingConfig)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")


# ---------------------------------------------------------------------------
# flat key=value config files


def parse_config_file(path):
    """Read a flat key=value file ('#' starts a comment) into a dict."""
    pairs = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            pairs[key.strip()] = value.strip()
    return pairs


def _parse_bool(value, key):
    low = value.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"{key}: expected a boolean, got {value!r}")


_TOP_KEYS = {
    "label": str,
    "dataset": str,
    "trials": int,
    "seed": int,
    "out_dir": str,
    "arch": str,
    "mlp_hidden": int,
    "resnet_width": int,
    "subset_per_class": int,
    "train_images": str,
    "train_labels": str,
    "test_images": str,
    "test_labels": str,
    "synth_train_per_class": int,
    "synth_test_per_class": int,
    "data_seed": int,
    "augment_pad": int,
}
_TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "optimizer": str,
    "learning_rate": float,
    "init": str,
}
_ICING_KEYS = {
    "icing_epochs": ("epochs", int),
    "icing_batch_size": ("batch_size", int),
    "icing_optimizer": ("optimizer", str),
    "icing_learning_rate": ("learning_rate", float),
    "head_init": ("head_init", str),
    "icing_init": ("init_scheme", str),
}


def config_from_pairs(pairs):
    """Build an ExperimentConfig from parsed key=value pairs."""
    top = {}
    train_kw = {"epochs": 3}
    icing_kw = {}
    for key, value in pairs.items():
        if key in _TOP_KEYS:
            top[key] = _TOP_KEYS[key](value)
        elif key in _TRAIN_KEYS:
            train_kw[key] = _TRAIN_KEYS[key](value)
        elif key in _ICING_KEYS:
            name, conv = _ICING_KEYS[key]
            icing_kw[name] = conv(value)
        elif key == "augment":
            train_kw["augmentation"] = _parse_bool(value, key)
        elif key == "augment_flip":
            top["augment_flip"] = _parse_bool(value, key)
        elif key == "cnn_channels":
            top["cnn_channels"] = tuple(int(v) for v in value.split(","))
        elif key == "train_files":
            top["train_files"] = tuple(v.strip() for v in value.split(","))
        elif key == "test_files":
            top["test_files"] = tuple(v.strip() for v in value.split(","))
        else:
            raise ValueError(f"unknown config key {key!r}")
    return ExperimentConfig(
        **top, train=TrainConfig(**train_kw), icing=IcingConfig(**icing_kw))


def load_experiment_config(path, overrides=None):
    pairs = parse_config_file(path)
    if overrides:
        pairs.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_pairs(pairs)


# ---------------------------------------------------------------------------
# datasets and architectures


def load_dataset_pair(config):
    """The (train, test) datasets a config names, subset if requested."""
    name = config.dataset
    if name == "mnist":
        train_ds = data_mod.load_mnist(config.train_images, config.train_labels)
        test_ds = data_mod.load_mnist(config.test_images, config.test_labels)
    elif name in ("cifar10", "cifar100"):
        train_ds = data_mod.load_cifar(list(config.train_files), name)
        test_ds = data_mod.load_cifar(list(config.test_files), name)
    elif name == "synthetic":
        train_ds = data_mod.synthetic_digits(
            config.synth_train_per_class, seed=config.data_seed)
        test_ds = data_mod.synthetic_digits(
            config.synth_test_per_class, seed=config.data_seed + 1)
    else:
        raise ValueError(f"unknown dataset {name!r}")
    if config.subset_per_class > 0:
        train_ds = data_mod.subset(
            train_ds, config.subset_per_class, seed=config.data_seed)
    return train_ds, test_ds


def build_network(config, input_shape, num_classes):
    """Instantiate the configured architecture for a (c,h,w) input."""
    c, h, w = input_shape
    arch = config.arch.lower().replace("_", "-")
    if arch == "mlp":
        hidden = config.mlp_hidden
        layers = [
            Flatten(),
            Dense(c * h * w, hidden),
            ReLU(),
            SoftmaxHead(hidden, num_classes),
        ]
    elif arch == "cnn":
        c1, c2 = config.cnn_channels
        layers = [
            Conv(c, c1, 3, stride=1, padding=1),
            ReLU(),
            MaxPool(2, 2),
            Conv(c1, c2, 3, stride=1, padding=1),
            ReLU(),
            MaxPool(2, 2),
            Flatten(),
            SoftmaxHead(c2 * (h // 4) * (w // 4), num_classes),
        ]
    elif arch.startswith("tinyresnet"):
        depth = int(arch.removeprefix("tinyresnet").lstrip("-"))
        if depth < 4 or depth % 2 != 0:
            raise ValueError(
                f"tinyresnet depth must be an even number >= 4, got {depth}")
        width = config.resnet_width
        layers = [Conv(c, width, 3, stride=1, padding=1), ReLU()]
        for _ in range((depth - 2) // 2):
            layers.append(ResidualBlock(width, 3))
        layers.extend([
            MaxPool(h, h),  # global spatial max
            Flatten(),
            SoftmaxHead(width, num_classes),
        ])
    else:
        raise ValueError(f"unknown architecture {config.arch!r}")
    return Network(layers, len(layers) - 1)


# ---------------------------------------------------------------------------
# the trial loop


def run_experiment(config):
    """Run all trials and write reports; returns (SummaryTable, reports).

    Fails fast on the first trial error; trials already completed stay on
    disk.  Inside every trial the fast evaluation path is asserted to
    agree exactly with evaluating the head-swapped network.
    """
    os.makedirs(config.out_dir, exist_ok=True)
    train_ds, test_ds = load_dataset_pair(config)
    policy = data_mod.AugmentPolicy(
        pad_crop=config.augment_pad,
        horizontal_flip=config.augment_flip,
        enabled=config.train.augmentation)
    reports = []
    for i in range(config.trials):
        seed = config.seed + i
        try:
            reports.append(_run_trial(
                config, i, seed, train_ds, test_ds, policy))
        except Exception as e:
            raise ExperimentError(f"trial {i} (seed {seed}) failed: {e}") from e
        emit_report(summarize(config.label, reports), reports,
                    "csv", config.out_dir)
    table = summarize(config.label, reports)
    emit_report(table, reports, "csv", config.out_dir)
    emit_report(table, reports, "markdown", config.out_dir)
    return table, reports


def _run_trial(config, index, seed, train_ds, test_ds, policy):
    net = build_network(
        config, train_ds.images.shape[1:], train_ds.num_classes)
    init_params(net, config.train.init, seed)
    train_cfg = dataclasses.replace(config.train, seed=seed)
    icing_cfg = dataclasses.replace(config.icing, seed=seed)

    t0 = time.perf_counter()
    net, _ = train(net, train_ds, train_cfg, augment_policy=policy)
    wall_train = time.perf_counter() - t0

    acc_before, loss_before = evaluate(net, test_ds)
    save_checkpoint(net, os.path.join(
        config.out_dir, f"trial_{index:03d}_before.ickpt"))

    t0 = time.perf_counter()
    iced, _, _ = apply_icing(net, train_ds, icing_cfg)
    wall_icing = time.perf_counter() - t0

    acc_after, loss_after = evaluate(iced, test_ds)
    fast = evaluate_fast_path(net, head_of(iced), test_ds)
    if fast != (acc_after, loss_after):
        raise RuntimeError(
            f"fast-path evaluation {fast} disagrees with the swapped "
            f"network ({acc_after}, {loss_after})")
    save_checkpoint(iced, os.path.join(
        config.out_dir, f"trial_{index:03d}_after.ickpt"))

    return TrialReport(
        seed=seed,
        acc_before=acc_before,
        acc_after=acc_after,
        loss_before=loss_before,
        loss_after=loss_after,
        wall_time_train=wall_train,
        wall_time_icing=wall_icing,
    )
