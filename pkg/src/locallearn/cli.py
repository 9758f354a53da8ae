"""Command line interface: train / gradcheck / eval.

`train` runs the full protocol and leaves three artifacts in --out:
metrics.csv (one row per epoch), manifest.txt (the resolved configuration as
sorted key=value lines), and final.ckpt. `gradcheck` runs the finite
difference suite and fails loudly on the first broken backward. `eval`
rebuilds an inference net from an architecture string and scores a
checkpoint on a dataset's test split.

Per-dataset defaults follow the experimental protocol (initial lr, epoch
budget, classifier pooling target, dropout by architecture family); explicit
flags always win.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as datamod
from . import gradcheck as gc
from .data import AugmentConfig, Dataset
from .errors import LocalLearnError
from .losses import MODES, LossConfig
from .trainer import (
    ARCH_PRESETS,
    TrainConfig,
    build_network,
    evaluate,
    load_network_state,
    metrics_csv,
    parse_arch,
    resolved_slope,
    save_network,
    train,
)

DATASETS = ("mnist", "fashion-mnist", "kmnist", "cifar10", "blobs")

# lr / epochs / pooling target per dataset; dropout by architecture family
DATASET_PRESETS = {
    "mnist": dict(lr=5e-4, epochs=100, pred_dim=1024, dropout_mlp=0.1, dropout_vgg=0.2),
    "fashion-mnist": dict(lr=5e-4, epochs=200, pred_dim=1024, dropout_mlp=0.025, dropout_vgg=0.1),
    "kmnist": dict(lr=5e-4, epochs=100, pred_dim=1024, dropout_mlp=0.2, dropout_vgg=0.3),
    "cifar10": dict(lr=5e-4, epochs=400, pred_dim=2048, dropout_mlp=0.1, dropout_vgg=0.2),
    "blobs": dict(lr=1e-3, epochs=20, pred_dim=64, dropout_mlp=0.0, dropout_vgg=0.0),
}


def _load_dataset(name: str, data_dir: str, seed: int):
    """Returns (train split, test split)."""
    if name == "blobs":
        full = datamod.synthetic_blobs(classes=10, per_class=120, dim=32, separation=6.0, seed=seed)
        test, train_ds = datamod.class_balanced_split(full, per_class=20, seed=seed)
        return train_ds, test
    if not data_dir:
        raise LocalLearnError(f"dataset {name!r} needs --data-dir")
    if name == "cifar10":
        return datamod.load_cifar10(data_dir, "train"), datamod.load_cifar10(data_dir, "test")
    return (
        datamod.load_mnist_dir(data_dir, "train", name),
        datamod.load_mnist_dir(data_dir, "test", name),
    )


def _family(resolved_arch: str) -> str:
    return "vgg" if "conv" in resolved_arch else "mlp"


def write_manifest(path, entries: dict) -> None:
    """Sorted key=value lines; the whole resolved configuration of a run."""
    with open(path, "w") as f:
        for key in sorted(entries):
            f.write(f"{key}={entries[key]}\n")


def cmd_train(args) -> int:
    preset = DATASET_PRESETS[args.dataset]
    train_ds, test_ds = _load_dataset(args.dataset, args.data_dir, args.seed)
    resolved_arch = ARCH_PRESETS.get(args.arch, args.arch)

    lr = args.lr if args.lr is not None else preset["lr"]
    epochs = args.epochs if args.epochs is not None else preset["epochs"]
    pred_dim = args.pred_dim if args.pred_dim is not None else preset["pred_dim"]
    dropout = args.dropout if args.dropout is not None else preset[f"dropout_{_family(resolved_arch)}"]

    loss = LossConfig(mode=args.loss, beta=args.beta)
    cfg = TrainConfig(
        arch=args.arch,
        epochs=epochs,
        lr=lr,
        batch_size=args.batch_size,
        dropout=dropout,
        slope=args.slope,
        seed=args.seed,
        classes_per_batch=args.classes_per_batch,
        width_mult=args.width_mult,
        pred_target_dim=pred_dim,
        augment=AugmentConfig(jitter=args.jitter, hflip=args.flip, cutout=args.cutout),
    )
    # fail on a bad architecture before touching the filesystem
    parse_arch(cfg.arch, train_ds.images.shape[1:], train_ds.num_classes, cfg.width_mult)

    train_std, test_std = datamod.standardize(train_ds, test_ds)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(
        os.path.join(args.out, "manifest.txt"),
        {
            "dataset": args.dataset,
            "data_dir": args.data_dir or "",
            "arch": cfg.arch,
            "arch_resolved": resolved_arch,
            "loss": loss.mode,
            "beta": repr(loss.resolved_beta),
            "projection_dim": loss.projection_dim,
            "epochs": cfg.epochs,
            "lr": repr(cfg.lr),
            "batch_size": cfg.batch_size,
            "dropout": repr(cfg.dropout),
            "slope": repr(resolved_slope(cfg.slope, loss.mode)),
            "seed": cfg.seed,
            "classes_per_batch": cfg.classes_per_batch,
            "width_mult": cfg.width_mult,
            "pred_target_dim": cfg.pred_target_dim,
            "jitter": cfg.augment.jitter,
            "hflip": str(cfg.augment.hflip).lower(),
            "cutout": cfg.augment.cutout,
            "out": args.out,
        },
    )

    net, history = train(cfg, loss, train_std, test_std)

    with open(os.path.join(args.out, "metrics.csv"), "w") as f:
        f.write(metrics_csv(history))
    save_network(net, os.path.join(args.out, "final.ckpt"))
    print(f"test_error={history[-1].test_error:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gc.run_all(corrupt=args.corrupt)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{r.name:24s} max_rel_err={r.max_err:.3e} {'ok' if r.ok else 'FAIL'}")
    if failed:
        print(f"gradcheck FAILED: {failed[0].name}", file=sys.stderr)
        return 1
    print(f"gradcheck passed: {len(results)} checks")
    return 0


def cmd_eval(args) -> int:
    train_ds, test_ds = _load_dataset(args.dataset, args.data_dir, args.seed)
    _, test_std = datamod.standardize(train_ds, test_ds)
    spec = parse_arch(args.arch, test_std.images.shape[1:], test_std.num_classes, args.width_mult)
    # heads never run at inference; a plain-backprop skeleton accepts any
    # mode's checkpoint and picks the trained slope up from it
    net = build_network(spec, LossConfig(mode="glob"))
    load_network_state(net, args.checkpoint)
    err = evaluate(net, test_std, args.batch_size)
    print(f"test_error={err:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="locallearn", description="Train deep nets from local error signals.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training protocol")
    t.add_argument("--dataset", choices=DATASETS, required=True)
    t.add_argument("--data-dir", default="", help="directory holding the dataset files")
    t.add_argument("--arch", default="mlp3x1024", help="preset name or token string like conv128-pool-fc")
    t.add_argument("--loss", choices=MODES, default="predsim")
    t.add_argument("--beta", type=float, default=None, help="sim weight for combined modes")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--dropout", type=float, default=None)
    t.add_argument("--slope", type=float, default=None, help="leaky relu slope (default by mode)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--classes-per-batch", type=int, default=0, help="restrict classes per batch until the first lr drop")
    t.add_argument("--jitter", type=int, default=0, help="random shift radius in pixels")
    t.add_argument("--flip", action="store_true", help="random horizontal flips")
    t.add_argument("--cutout", type=int, default=0, help="cutout hole side in pixels")
    t.add_argument("--width-mult", type=int, default=1, help="multiply conv channel counts")
    t.add_argument("--pred-dim", type=int, default=None, help="pooling target for local classifiers")
    t.add_argument("--out", required=True, help="output directory for metrics/manifest/checkpoint")
    t.set_defaults(fn=cmd_train)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)  # test hook
    g.set_defaults(fn=cmd_gradcheck)

    e = sub.add_parser("eval", help="score a checkpoint on a test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", choices=DATASETS, required=True)
    e.add_argument("--data-dir", default="")
    e.add_argument("--arch", required=True)
    e.add_argument("--width-mult", type=int, default=1)
    e.add_argument("--batch-size", type=int, default=512)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except LocalLearnError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
