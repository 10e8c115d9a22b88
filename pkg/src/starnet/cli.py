"""Command-line front end.

Subcommands: train, finetune, eval, infer, flow, gradcheck.  Options come
from defaults, then a JSON config file, then explicit flags (flags win).
Exit codes: 0 success, 1 usage, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .autodiff import ContractViolation
from .checkpoint import CheckpointFormatError, load_checkpoint
from .data import DatasetError, FlowPyramidConfig, scan_dataset
from .flow import FlowFormatError, estimate_flow, write_flo
from .gradcheck import gradcheck
from .image import bicubic_resize, read_png
from .losses import VARIANT_TERMS, VariantSpec
from .model import AblationFlags, ModelConfig
from .train import NumericalError, TrainConfig, evaluate, finetune, \
    format_report, infer, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(ValueError):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed config file {path}: {exc}") from exc


_FLAG_PATHS = {
    "epochs": ("epochs_total",),
    "lr": ("lr_initial",),
    "loss": ("loss_kind",),
    "variant": ("variant",),
    "batch_size": ("batch", "batch_size"),
    "patch": ("batch", "patch_lr"),
    "seed": ("batch", "seed"),
    "c_h": ("model", "c_h"),
    "c_l": ("model", "c_l"),
    "model_seed": ("model", "seed"),
    "flow_source": ("flow_source",),
    "no_augment": ("augment",),
}

_ABLATION_FLAGS = ("use_stage2", "use_flow_input", "use_flow_refinement",
                   "tsr_hr_path", "tsr_lr_path")


def build_train_config(args) -> TrainConfig:
    cfg = _load_config(getattr(args, "config", None))
    for flag, path in _FLAG_PATHS.items():
        value = getattr(args, flag, None)
        if value is None or value is False:
            continue
        if flag == "no_augment":
            value = False
        if flag == "patch":
            value = tuple(value)
        node = cfg
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    ablation = cfg.setdefault("model", {}).setdefault("ablation", {})
    for name in _ABLATION_FLAGS:
        value = getattr(args, "no_" + name, False)
        if value:
            ablation[name] = False
    if not ablation:
        del cfg["model"]["ablation"]
    if not cfg["model"]:
        del cfg["model"]
    try:
        return TrainConfig.from_dict(cfg)
    except TypeError as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss", choices=("L_r", "L_f"))
    p.add_argument("--variant", choices=sorted(VARIANT_TERMS))
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--patch", type=int, nargs=2, metavar=("W", "H"),
                   help="LR patch size")
    p.add_argument("--seed", type=int)
    p.add_argument("--c-h", type=int, dest="c_h")
    p.add_argument("--c-l", type=int, dest="c_l")
    p.add_argument("--model-seed", type=int, dest="model_seed")
    p.add_argument("--flow-source", choices=("estimate", "flo_dir"),
                   dest="flow_source")
    p.add_argument("--no-augment", action="store_true", dest="no_augment")
    for name in _ABLATION_FLAGS:
        p.add_argument("--no-" + name.replace("_", "-"), action="store_true",
                       dest="no_" + name)


def _add_data_flags(p, split="train"):
    p.add_argument("--data-root", required=True)
    p.add_argument("--list-file", required=True)
    p.add_argument("--split", default=split, choices=("train", "test"))


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="starnet")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from scratch")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--dry-run", action="store_true",
                   help="log the learning-rate schedule without training")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("finetune", help="fine-tune from a base checkpoint")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("eval", help="compute metrics over a dataset split")
    _add_data_flags(p, split="test")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True, help="report path stem")
    p.add_argument("--metrics", default="psnr,ssim",
                   help="comma-separated subset of psnr,ssim,ie")
    p.add_argument("--flow-source", choices=("estimate", "flo_dir"),
                   default="estimate", dest="flow_source")

    p = sub.add_parser("infer", help="upscale and interpolate a frame folder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True, help="folder of input PNGs")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("stsr", "cascade_t4"), default="stsr")

    p = sub.add_parser("flow", help="precompute .flo files for a dataset")
    _add_data_flags(p)
    p.add_argument("--scale", type=int, default=4)

    p = sub.add_parser("gradcheck", help="verify gradients on a toy model")
    p.add_argument("--c-h", type=int, default=16, dest="c_h")
    p.add_argument("--c-l", type=int, default=32, dest="c_l")
    p.add_argument("--coords-per-group", type=int, default=13)
    p.add_argument("--loss", choices=("L_r", "L_f", "both"), default="both")
    p.add_argument("--seed", type=int, default=0)
    return ap


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    index = scan_dataset(args.data_root, args.list_file, args.split)
    os.makedirs(args.out, exist_ok=True)
    train(cfg, index, out_dir=args.out, dry_run=args.dry_run,
          max_steps=args.max_steps, epochs=args.epochs)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = build_train_config(args)
    if args.variant is None:
        raise UsageError("finetune requires --variant")
    base = load_checkpoint(args.checkpoint)
    cfg = type(cfg).from_dict({**cfg.to_dict(),
                               "model": base.model_config,
                               "variant": args.variant})
    index = scan_dataset(args.data_root, args.list_file, args.split)
    os.makedirs(args.out, exist_ok=True)
    finetune(base, VariantSpec(args.variant), cfg, index, out_dir=args.out,
             dry_run=args.dry_run, max_steps=args.max_steps)
    return EXIT_OK


def cmd_eval(args) -> int:
    metrics = tuple(m for m in args.metrics.split(",") if m)
    for m in metrics:
        if m not in ("psnr", "ssim", "ie"):
            raise UsageError(f"unknown metric {m!r}")
    ckpt = load_checkpoint(args.checkpoint)
    index = scan_dataset(args.data_root, args.list_file, args.split)
    report = evaluate(ckpt, index, metrics=metrics, report_path=args.report,
                      flow_source=args.flow_source)
    sys.stdout.write(format_report(report))
    return EXIT_OK


def cmd_infer(args) -> int:
    if not os.path.isdir(args.frames):
        raise UsageError(f"{args.frames} is not a directory")
    names = [n for n in os.listdir(args.frames) if n.endswith(".png")]
    if len(names) < 2:
        raise UsageError("infer requires at least 2 input frames")
    ckpt = load_checkpoint(args.checkpoint)
    infer(ckpt, args.frames, args.out, mode=args.mode)
    return EXIT_OK


def cmd_flow(args) -> int:
    index = scan_dataset(args.data_root, args.list_file, args.split)
    cfg = FlowPyramidConfig()
    pairs = {"fwd": (0, 2), "bwd": (2, 0), "t_tn": (0, 1), "tn_t1": (1, 2),
             "t1_tn": (2, 1), "tn_t": (1, 0)}
    names = tuple(pairs) if args.split == "train" else ("fwd", "bwd")
    for i in range(len(index)):
        seq_dir = index.sequence_dir(i)
        hr = [read_png(os.path.join(seq_dir, f"im{k}.png")) for k in (1, 2, 3)]
        h, w = hr[0].shape[:2]
        lr = [bicubic_resize(im, h // args.scale, w // args.scale) for im in hr]
        out_dir = index.flow_dir(i)
        os.makedirs(out_dir, exist_ok=True)
        for name in names:
            a, b = pairs[name]
            flow = estimate_flow(lr[a], lr[b], cfg)
            write_flo(flow, os.path.join(out_dir, name + ".flo"))
        print(f"{index.entries[i]}: wrote {len(names)} flow fields")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = ModelConfig(c_h=args.c_h, c_l=args.c_l, seed=args.seed)
    kinds = ("L_r", "L_f") if args.loss == "both" else (args.loss,)
    ok = True
    for kind in kinds:
        report = gradcheck(cfg=cfg, loss_kind=kind,
                           coords_per_group=args.coords_per_group,
                           seed=args.seed, log=print)
        ok = ok and report["passed"]
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {"train": cmd_train, "finetune": cmd_finetune, "eval": cmd_eval,
            "infer": cmd_infer, "flow": cmd_flow, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    ap = make_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointFormatError, FlowFormatError,
            ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
