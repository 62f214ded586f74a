"""Command-line harness: train, icing, evaluate, experiment, report.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .checkpoint import load_checkpoint, save_checkpoint
from .experiment import (
    build_network,
    load_dataset_pair,
    load_experiment_config,
    run_experiment,
)
from .icing import apply_icing, save_feature_bank
from .network import evaluate, init_params, train
from .reports import (
    emit_report,
    read_trials_csv,
    summarize,
    summary_markdown_lines,
)
from . import data as data_mod


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems instead of exiting 2."""

    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="ick", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        if checkpoint:
            p.add_argument("checkpoint", help="path to an ICK1 checkpoint")
        p.add_argument("--config", help="key=value experiment config file")
        p.add_argument("--seed", type=int, help="override the base seed")
        p.add_argument("--out-dir", help="override the output directory")
        p.add_argument("--dataset", help="override the dataset name")
        p.add_argument("--format", choices=("csv", "markdown"),
                       help="report format to emit")

    common(sub.add_parser("train", help="ordinary training, writes a checkpoint"))
    common(sub.add_parser("icing", help="retrain the head of a checkpoint"),
           checkpoint=True)
    common(sub.add_parser("evaluate", help="accuracy/loss of a checkpoint"),
           checkpoint=True)
    common(sub.add_parser("experiment", help="full multi-trial run"))
    common(sub.add_parser("report", help="re-emit tables from stored trials"))
    return parser


def _load_config(args, required=True):
    if not args.config:
        if required:
            raise UsageError(f"{args.command} requires --config")
        return None
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.dataset is not None:
        overrides["dataset"] = args.dataset
    return load_experiment_config(args.config, overrides)


def _cmd_train(args):
    config = _load_config(args)
    train_ds, _ = load_dataset_pair(config)
    net = build_network(config, train_ds.images.shape[1:], train_ds.num_classes)
    init_params(net, config.train.init, config.train.seed if args.seed is None
                else args.seed)
    cfg = config.train if args.seed is None else dataclasses.replace(
        config.train, seed=args.seed)
    policy = data_mod.AugmentPolicy(
        pad_crop=config.augment_pad,
        horizontal_flip=config.augment_flip,
        enabled=cfg.augmentation)
    net, log = train(net, train_ds, cfg, augment_policy=policy)
    for entry in log:
        print(f"epoch {entry.epoch}: loss {entry.mean_loss:.6f} "
              f"accuracy {entry.accuracy:.4f}")
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "model.ickpt")
    save_checkpoint(net, path)
    print(f"checkpoint written to {path}")
    return 0


def _cmd_icing(args):
    config = _load_config(args)
    train_ds, test_ds = load_dataset_pair(config)
    net = load_checkpoint(args.checkpoint)
    acc_before, loss_before = evaluate(net, test_ds)
    icing_cfg = config.icing if args.seed is None else dataclasses.replace(
        config.icing, seed=args.seed)
    iced, bank, _ = apply_icing(net, train_ds, icing_cfg)
    acc_after, loss_after = evaluate(iced, test_ds)
    os.makedirs(config.out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.checkpoint))[0]
    out_path = os.path.join(config.out_dir, f"{stem}_icing.ickpt")
    save_checkpoint(iced, out_path)
    bank_path = os.path.join(config.out_dir, f"{stem}_features.ickf")
    save_feature_bank(bank, bank_path)
    print(f"before: accuracy {acc_before:.3f} loss {loss_before:.6f}")
    print(f"after:  accuracy {acc_after:.3f} loss {loss_after:.6f}")
    print(f"checkpoint written to {out_path}")
    return 0


def _cmd_evaluate(args):
    config = _load_config(args)
    _, test_ds = load_dataset_pair(config)
    net = load_checkpoint(args.checkpoint)
    acc, loss = evaluate(net, test_ds)
    print(f"accuracy {acc:.3f} loss {loss:.6f}")
    return 0


def _cmd_experiment(args):
    config = _load_config(args)
    table, reports = run_experiment(config)
    if args.format is not None:
        emit_report(table, reports, args.format, config.out_dir)
    for line in summary_markdown_lines(table):
        print(line)
    print(f"reports written to {config.out_dir}")
    return 0


def _cmd_report(args):
    config = _load_config(args, required=False)
    out_dir = args.out_dir or (config.out_dir if config else None)
    if not out_dir:
        raise UsageError("report requires --out-dir (or --config with out_dir)")
    trials_path = os.path.join(out_dir, "trials.csv")
    reports = read_trials_csv(trials_path)
    label = config.label if config else os.path.basename(os.path.normpath(out_dir))
    table = summarize(label, reports)
    fmt = args.format
    if fmt is None:
        emit_report(table, reports, "csv", out_dir)
        emit_report(table, reports, "markdown", out_dir)
    else:
        emit_report(table, reports, fmt, out_dir)
    for line in summary_markdown_lines(table):
        print(line)
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "icing": _cmd_icing,
    "evaluate": _cmd_evaluate,
    "experiment": _cmd_experiment,
    "report": _cmd_report,
}


def cli_main(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"ick: error: {e}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"ick: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"ick: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
