"""Command line front end.

One subcommand per workflow stage: pre-train a backbone, probe or
finetune it on labels, export the packed inference form, count
operations, inspect saturation, or benchmark the kernels.
"""

import argparse
import sys

import numpy as np

from bnnkit import bench as bench_mod
from bnnkit import checkpoint as ck
from bnnkit import data as dt
from bnnkit import pipeline as pl
from bnnkit.errors import ConfigError, FormatError


def _add_data_flags(p, batch=128):
    p.add_argument("--dataset", choices=("idx", "cifar", "synth"),
                   default="synth")
    p.add_argument("--data", default="", metavar="DIR",
                   help="dataset directory/file, or a synth spec like "
                        "'n=4096,classes=10,seed=0'")
    p.add_argument("--batch", type=int, default=batch, metavar="N")
    p.add_argument("--seed", type=int, default=0, metavar="N")


def _add_train_flags(p):
    p.add_argument("--scheme", choices=("cl", "cl+kd", "kd"), default="cl",
                   help="contrastive, contrastive plus distillation, or "
                        "distillation only")
    p.add_argument("--plan", choices=("one-step", "two-step"),
                   default="one-step",
                   help="two-step binarizes activations first, weights second")
    p.add_argument("--teacher", default="online", metavar="PATH",
                   help="teacher checkpoint, or 'online' to co-train one")
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--lr", type=float, default=3e-4, metavar="F")
    p.add_argument("--wd", type=float, default=None, metavar="F",
                   help="weight decay (default: per-stage policy)")
    p.add_argument("--tau", type=float, default=0.2, metavar="F")
    p.add_argument("--queue-size", type=int, default=4096, metavar="N")
    p.add_argument("--epochs", type=int, default=30, metavar="N")
    p.add_argument("--arch", choices=("toy-bin", "bireal-tiny", "teacher-real"),
                   default="toy-bin")
    p.add_argument("--width", type=int, default=32, metavar="N")
    p.add_argument("--aug", choices=("lite", "vanilla"), default="lite")
    p.add_argument("--embed-dim", type=int, default=64, metavar="N")


def _load_ckpt(path):
    header, tensors = ck.load_checkpoint(path)
    return header, tensors


def _cmd_pretrain(a):
    cfg = pl.RunConfig(
        scheme=a.scheme, plan=a.plan, arch=a.arch, width=a.width,
        optimizer=a.optimizer, lr=a.lr, weight_decay=a.wd, tau=a.tau,
        queue_size=a.queue_size, epochs=a.epochs, batch_size=a.batch,
        seed=a.seed, aug=a.aug, dataset=a.dataset, data=a.data,
        teacher=a.teacher, embed_dim=a.embed_dim, out=a.out)
    header, _, history = pl.pretrain(cfg)
    for i, loss in enumerate(history):
        print(f"epoch {i} loss {loss:.4f}")
    print(f"saved stage={header.stage} scheme={header.scheme} "
          f"arch={header.arch} -> {a.out}")


def _cmd_linear_eval(a):
    header, tensors = _load_ckpt(a.ckpt)
    train = dt.load_dataset(a.data, a.dataset)
    val = dt.load_dataset(a.val_data, a.dataset) if a.val_data else None
    grid = (a.lr,) if a.lr is not None else pl.LR_GRID
    res = pl.linear_eval(header, tensors, train, val, lr_grid=grid,
                         epochs=a.epochs, batch_size=a.batch, seed=a.seed)
    print(res.format())


def _cmd_finetune(a):
    header, tensors = _load_ckpt(a.ckpt)
    handle = dt.load_dataset(a.data, a.dataset)
    targets = None
    if a.multi_label:
        if not handle.has_labels:
            raise ConfigError("multi-label finetuning needs labels")
        y = handle.labels
        targets = np.zeros((y.size, int(y.max()) + 1), dtype=np.float32)
        targets[np.arange(y.size), y] = 1.0
    hdr, out, history = pl.transfer_finetune(
        header, tensors, handle, epochs=a.epochs, lr=a.lr,
        optimizer=a.optimizer, batch_size=a.batch, seed=a.seed,
        weight_decay=a.wd, multi_label=a.multi_label, targets=targets)
    for i, loss in enumerate(history):
        print(f"epoch {i} loss {loss:.4f}")
    if a.out:
        ck.save_checkpoint(a.out, hdr, out)
        print(f"saved stage={hdr.stage} -> {a.out}")


def _cmd_export_bin(a):
    header, tensors = _load_ckpt(a.ckpt)
    pl.save_packed(a.out, header, tensors)
    pm = pl.load_packed(a.out)
    packed, latent = pm.packed_weight_bytes(), pm.latent_weight_bytes()
    print(f"packed conv weights {packed} bytes "
          f"(float32 would be {latent}, {latent / packed:.1f}x larger)")
    print(f"saved -> {a.out}")


def _cmd_count_ops(a):
    rep = pl.count_ops(a.arch, a.width, image_hw=a.image_hw,
                       classes=a.classes)
    if a.per_layer:
        for name, kind, bops, flops in rep.per_layer:
            print(f"{name} {kind} bops={bops} flops={flops}")
    print(rep.format())


def _cmd_diagnose(a):
    header, tensors = _load_ckpt(a.ckpt)
    handle = dt.load_dataset(a.data, a.dataset)
    text = pl.diagnose(header, tensors, handle, batch_size=a.batch)
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(text)
        print(f"saved -> {a.out}")
    else:
        sys.stdout.write(text)


def _cmd_bench(a):
    print(bench_mod.report(dims=(a.dim,), reps=a.reps, seed=a.seed))


def _parser():
    ap = argparse.ArgumentParser(
        prog="bnnkit",
        description="binary network pre-training and inference toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    _add_train_flags(p)
    _add_data_flags(p)
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(run=_cmd_pretrain)

    p = sub.add_parser("linear-eval",
                       help="linear probe on a frozen backbone")
    p.add_argument("ckpt", metavar="CKPT")
    _add_data_flags(p, batch=256)
    p.add_argument("--val-data", default=None, metavar="DIR",
                   help="eval split (default: hold out a fifth of --data)")
    p.add_argument("--epochs", type=int, default=40, metavar="N")
    p.add_argument("--lr", type=float, default=None, metavar="F",
                   help="single grid point instead of the full sweep")
    p.set_defaults(run=_cmd_linear_eval)

    p = sub.add_parser("finetune", help="end-to-end transfer on labels")
    p.add_argument("ckpt", metavar="CKPT")
    _add_data_flags(p)
    p.add_argument("--epochs", type=int, default=10, metavar="N")
    p.add_argument("--lr", type=float, default=1e-3, metavar="F")
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--wd", type=float, default=None, metavar="F")
    p.add_argument("--multi-label", action="store_true",
                   help="sigmoid cross-entropy over one-hot targets")
    p.add_argument("--out", default=None, metavar="PATH")
    p.set_defaults(run=_cmd_finetune)

    p = sub.add_parser("export-bin", help="pack a checkpoint for inference")
    p.add_argument("ckpt", metavar="CKPT")
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(run=_cmd_export_bin)

    p = sub.add_parser("count-ops", help="binary/float operation totals")
    p.add_argument("--arch", choices=("toy-bin", "bireal-tiny", "teacher-real"),
                   default="toy-bin")
    p.add_argument("--width", type=int, default=32, metavar="N")
    p.add_argument("--image-hw", type=int, default=32, metavar="N")
    p.add_argument("--classes", type=int, default=0, metavar="N",
                   help="include a classifier head of this many classes")
    p.add_argument("--per-layer", action="store_true")
    p.set_defaults(run=_cmd_count_ops)

    p = sub.add_parser("diagnose", help="saturation report as CSV")
    p.add_argument("ckpt", metavar="CKPT")
    _add_data_flags(p, batch=256)
    p.add_argument("--out", default=None, metavar="PATH")
    p.set_defaults(run=_cmd_diagnose)

    p = sub.add_parser("bench", help="packed kernel against float dot")
    p.add_argument("--dim", type=int, default=4096, metavar="N")
    p.add_argument("--reps", type=int, default=20000, metavar="N")
    p.add_argument("--seed", type=int, default=0, metavar="N")
    p.set_defaults(run=_cmd_bench)

    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        args.run(args)
    except (ConfigError, FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0
