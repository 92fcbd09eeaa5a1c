"""Command-line entry point for reproducible runs.

Results land on stdout in a machine-readable form; diagnostics and the
fully resolved configuration go to stderr. Every random decision in a run
is fixed by ``--seed``.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import report, weights
from .attention import AttentionTowerConfig, tower_param_table, tower_widths
from .augment import AugmentConfig, CutoutConfig, rescale
from .data import (
    IMAGE_SIZE,
    SyntheticTaskConfig,
    generate_synthetic,
    load_dataset_dir,
    load_ppm,
    resize_bilinear,
    stratified_split,
)
from .mobile_block import mbblock_param_table
from .model import BackbonePretrainNet, param_checksum
from .train import PROFILES, TrainConfig, evaluate, fine_tune, train_loop


def _common_flags(sub):
    sub.add_argument("--seed", type=int, default=0, help="fixes every random decision")
    sub.add_argument("--precision", choices=("f32", "f64"), default="f32")
    sub.add_argument(
        "--profile",
        choices=tuple(PROFILES),
        default=os.environ.get("FDFT_PROFILE", "desk"),
        help="desk: batch 32 / 60 epochs; paper: batch 128 / 300 epochs",
    )
    sub.add_argument("--threads", type=int, default=1, help="augmentation worker count")
    sub.add_argument("--config", default=None, help="key=value file merged under the flags")


def build_parser():
    parser = argparse.ArgumentParser(prog="fakedet", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth-data", help="generate the synthetic real-vs-artifact dataset")
    _common_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--artifact-amp", type=float, default=0.25)
    p.add_argument("--blob-count", type=int, default=6)
    p.add_argument("--artifact-period", type=int, default=2)
    p.add_argument("--artifact-region", type=float, default=0.5)

    p = subs.add_parser("pretrain", help="train the stand-in backbone and save its weights")
    _common_flags(p)
    p.add_argument("--data", required=True, help="dataset root with real/ and fake/")
    p.add_argument("--out", required=True, help="backbone weight file (.fdwt)")
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=None, help="override the profile epoch budget")
    p.add_argument("--batch", type=int, default=None, help="override the profile batch size")
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--augment", action="store_true", help="apply training augmentation")
    p.add_argument("--report-dir", default=None, help="history CSV + figures (default: beside --out)")

    p = subs.add_parser("finetune", help="attach the trainable branches to a frozen backbone and train")
    _common_flags(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True, help="fine-tune pool with real/ and fake/")
    p.add_argument("--out", required=True, help="model weight file (.fdwt)")
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--m", type=int, default=3, help="attention stages")
    p.add_argument("--n", type=int, default=4, help="fine-tuning block count")
    p.add_argument("--cutout-alpha", type=int, default=3)
    p.add_argument("--cutout-beta", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.3)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--no-attention", action="store_true", help="ablation: zero out the attention branch")
    p.add_argument("--report-dir", default=None)

    p = subs.add_parser("eval", help="evaluate a model on a labeled dataset")
    _common_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report-dir", default=None, help="metrics CSV + ROC/histogram figures")

    p = subs.add_parser("predict", help="fake probability for one image")
    _common_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="a binary PPM file")

    p = subs.add_parser("params", help="per-layer parameter-count tables")
    _common_flags(p)
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--backbone-channels", type=int, default=128, help="input width of the first block")

    return parser


def _merge_config_file(argv):
    """Re-parse with config-file entries inserted before the explicit flags,
    so the command line wins."""
    if "--config" not in " ".join(argv):
        return argv
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return argv
    extra = []
    for line_no, line in enumerate(Path(known.config).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{known.config}:{line_no}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "yes", "1") and key in ("augment", "no_attention", "no-attention"):
            extra.append(flag)
        else:
            extra.append(flag)
            extra.append(value)
    return [argv[0], *extra, *argv[1:]]


def _print_config(args):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "config"}
    pairs = " ".join(f"{k}={v}" for k, v in resolved.items())
    print(f"resolved config: {pairs}", file=sys.stderr)


def _train_config(args, lr):
    overrides = {"seed": args.seed, "lr0": lr, "patience": args.patience}
    if args.epochs is not None:
        overrides["max_epochs"] = args.epochs
    if args.batch is not None:
        overrides["batch_size"] = args.batch
    return TrainConfig.for_profile(args.profile, **overrides)


def _fmt_metrics(metrics):
    auroc = float("nan") if metrics.auroc is None else metrics.auroc
    return f"ACC={metrics.acc:.4f} AUROC={auroc:.4f}"


def cmd_synth_data(args):
    cfg = SyntheticTaskConfig(
        n_per_class=args.n_per_class,
        seed=args.seed,
        blob_count=args.blob_count,
        artifact_amplitude=args.artifact_amp,
        artifact_period=args.artifact_period,
        artifact_region=args.artifact_region,
    )
    if cfg.artifact_amplitude == 0:
        print("warning: artifact amplitude 0 makes real and fake identically distributed", file=sys.stderr)
    ds = generate_synthetic(cfg, out_root=args.out)
    counts = ds.class_counts()
    print(f"real={counts[0]} fake={counts[1]} out={args.out}")
    return 0


def cmd_pretrain(args):
    ds = load_dataset_dir(args.data)
    train_set, val_set = stratified_split(ds, (1 - args.val_frac, args.val_frac), args.seed, ("train", "val"))
    cfg = _train_config(args, args.lr)
    net = BackbonePretrainNet(seed=args.seed, precision=args.precision)
    aug = AugmentConfig() if args.augment else None
    net, history = train_loop(net, train_set, val_set, cfg, aug=aug, threads=args.threads)
    weights.save_backbone(net, args.out)

    report_dir = args.report_dir or Path(args.out).resolve().parent
    csv_path = report.write_training_report(history, report_dir, "pretrain")
    print(f"history written to {csv_path}", file=sys.stderr)

    final = evaluate(net, val_set)
    print(f"backbone={args.out} epochs={len(history)} val_loss={final.loss:.6f} {_fmt_metrics(final)}")
    return 0


def cmd_finetune(args):
    ds = load_dataset_dir(args.data)
    tune_set, val_set = stratified_split(ds, (1 - args.val_frac, args.val_frac), args.seed, ("finetune", "val"))
    cfg = _train_config(args, args.lr)
    aug = AugmentConfig(cutout=CutoutConfig(alpha=args.cutout_alpha, beta=args.cutout_beta))

    ref = weights.assemble_from_backbone(args.backbone, stages=args.m, n_blocks=args.n, seed=args.seed)
    checksum_before = param_checksum(ref.backbone_parameters())
    model, history = fine_tune(
        args.backbone,
        tune_set,
        val_set,
        stages=args.m,
        n_blocks=args.n,
        cfg=cfg,
        aug=aug,
        attention_branch=not args.no_attention,
        threads=args.threads,
    )
    checksum_after = param_checksum(model.backbone_parameters())
    weights.save_model(model, args.out)

    report_dir = args.report_dir or Path(args.out).resolve().parent
    csv_path = report.write_training_report(history, report_dir, "finetune")
    print(f"history written to {csv_path}", file=sys.stderr)

    final = evaluate(model, val_set)
    print(f"frozen_params={model.backbone_param_total()}")
    print(f"trainable_params={model.trainable_param_total()}")
    print(f"backbone_checksum_before=0x{checksum_before:08x}")
    print(f"backbone_checksum_after=0x{checksum_after:08x}")
    print(f"model={args.out} epochs={len(history)} val_loss={final.loss:.6f} {_fmt_metrics(final)}")
    return 0


def cmd_eval(args):
    model = weights.load_model(args.model)
    ds = load_dataset_dir(args.data)
    metrics = evaluate(model, ds)
    if args.report_dir:
        scores = model.predict_proba(ds.images)
        report.write_eval_report(metrics, ds.labels, scores, args.report_dir)
        print(f"report written to {args.report_dir}", file=sys.stderr)
    print(_fmt_metrics(metrics))
    return 0


def cmd_predict(args):
    model = weights.load_model(args.model)
    img = rescale(load_ppm(args.image))
    if img.shape[:2] != (IMAGE_SIZE, IMAGE_SIZE):
        img = resize_bilinear(img, IMAGE_SIZE, IMAGE_SIZE)
    print(f"{model.predict_proba(img):.4f}")
    return 0


def _print_table(title, rows, total):
    print(title)
    print(f"  {'operation':<26}{'parameters':>12}  {'out width':>9}")
    for op, count, width in rows:
        print(f"  {op:<26}{count:>12,}  {width:>9}")
    print(f"  {'total':<26}{total:>12,}")


def cmd_params(args):
    tower_cfg = AttentionTowerConfig(stage_widths=tower_widths(args.m))
    tower_rows, tower_total = tower_param_table(tower_cfg)
    _print_table(f"attention tower (stages={args.m})", tower_rows, tower_total)

    block_rows, block_total = mbblock_param_table(args.backbone_channels)
    print()
    _print_table(f"inverted-residual block (c_in={args.backbone_channels})", block_rows, block_total)
    rest_total = mbblock_param_table(128)[1]

    head_count = (tower_cfg.out_channels + 128) * 1 + 1
    blocks_total = block_total + (args.n - 1) * rest_total
    print()
    print(f"classification head: {head_count:,}")
    print(f"trainable_total={tower_total + blocks_total + head_count:,} (tower + {args.n} blocks + head)")
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "params": cmd_params,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _merge_config_file(argv)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    args = parser.parse_args(argv)
    _print_config(args)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
