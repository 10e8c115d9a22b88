"""Training, fine-tuning, evaluation, and inference entry points."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import data as data_mod
from .autodiff import ContractViolation, Tensor
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint
from .data import (BatchSpec, DatasetIndex, FlowPyramidConfig, load_records,
                   make_batches, random_crop_spec, augment_triplet, stack_batch)
from .flow import estimate_flow
from .image import read_png, write_png
from .losses import (FeatureExtractor, LossTargets, LossWeights, VariantSpec,
                     loss_f, loss_r)
from .metrics import interp_error, psnr, ssim
from .model import ModelConfig, Starnet, clamp01
from .optim import AdaMaxState, adamax_step, zero_grad


class NumericalError(RuntimeError):
    """Non-finite values encountered during optimization."""


@dataclass
class TrainConfig:
    epochs_total: int = 70
    lr_initial: float = 1e-4
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 30
    finetune_epochs: int = 20
    finetune_decay_every: int = 10
    batch: BatchSpec = field(default_factory=BatchSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    loss_kind: str = "L_r"            # "L_r" or "L_f"
    variant: VariantSpec = field(default_factory=VariantSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: bool = True
    flow_source: str = "estimate"

    def __post_init__(self):
        if self.epochs_total <= 0 or self.lr_initial <= 0:
            raise ContractViolation("epochs and learning rate must be positive")
        if self.loss_kind not in ("L_r", "L_f"):
            raise ContractViolation(f"unknown loss kind {self.loss_kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.name
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "batch" in d and isinstance(d["batch"], dict):
            b = dict(d["batch"])
            if "patch_lr" in b:
                b["patch_lr"] = tuple(b["patch_lr"])
            d["batch"] = BatchSpec(**b)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if "variant" in d and isinstance(d["variant"], str):
            d["variant"] = VariantSpec(d["variant"])
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        return TrainConfig(**d)


def schedule_lr(lr_initial: float, decay_factor: float, decay_every: int,
                epoch: int) -> float:
    return lr_initial / decay_factor ** (epoch // decay_every)


# -- checkpoint plumbing ----------------------------------------------------

def model_to_checkpoint(model: Starnet, opt: AdaMaxState | None = None,
                        epoch: int = 0, rng_state=None) -> Checkpoint:
    tensors = {}
    for group, p in model.named_parameters():
        tensors[f"param/{p.name}"] = np.asarray(p.data, np.float32)
    meta = {"epoch": epoch}
    if opt is not None:
        meta["optimizer"] = {"learning_rate": opt.learning_rate,
                             "beta1": opt.beta1, "beta2": opt.beta2,
                             "epsilon": opt.epsilon, "step": opt.step}
        for name, arr in opt.m.items():
            tensors[f"optim.m/{name}"] = np.asarray(arr, np.float32)
        for name, arr in opt.u.items():
            tensors[f"optim.u/{name}"] = np.asarray(arr, np.float32)
    if rng_state is not None:
        meta["rng_state"] = json.loads(json.dumps(rng_state, default=int))
    return Checkpoint(model_config=model.cfg.to_dict(), tensors=tensors, meta=meta)


def checkpoint_to_model(ckpt: Checkpoint, dtype=np.float32):
    cfg = ModelConfig.from_dict(ckpt.model_config)
    model = Starnet(cfg, dtype=dtype)
    loaded = 0
    for _, p in model.named_parameters():
        key = f"param/{p.name}"
        if key not in ckpt.tensors:
            raise ContractViolation(f"checkpoint missing parameter {p.name}")
        arr = ckpt.tensors[key]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ContractViolation(
                f"checkpoint shape mismatch for {p.name}: "
                f"{arr.shape} vs {p.data.shape}")
        p.data = arr.astype(dtype)
        loaded += 1
    opt = None
    if "optimizer" in ckpt.meta:
        o = ckpt.meta["optimizer"]
        opt = AdaMaxState(learning_rate=o["learning_rate"], beta1=o["beta1"],
                          beta2=o["beta2"], epsilon=o["epsilon"], step=o["step"])
        for key, arr in ckpt.tensors.items():
            if key.startswith("optim.m/"):
                opt.m[key[len("optim.m/"):]] = arr.astype(dtype)
            elif key.startswith("optim.u/"):
                opt.u[key[len("optim.u/"):]] = arr.astype(dtype)
    return model, opt


# -- the training step ------------------------------------------------------

def _targets_from_batch(batch: dict) -> LossTargets:
    return LossTargets(hr_t=batch.get("hr_t"), hr_tn=batch.get("hr_tn"),
                       hr_t1=batch.get("hr_t1"), lr_tn=batch.get("lr_tn"),
                       f_t_tn=batch.get("t_tn"), f_tn_t1=batch.get("tn_t1"),
                       f_t1_tn=batch.get("t1_tn"), f_tn_t=batch.get("tn_t"))


def compute_loss(model: Starnet, batch: dict, cfg: TrainConfig,
                 fx: FeatureExtractor | None = None) -> Tensor:
    out = model.full_forward(batch["I_t"], batch["I_t1"],
                             batch.get("F_fwd"), batch.get("F_bwd"))
    targets = _targets_from_batch(batch)
    if cfg.loss_kind == "L_f":
        if fx is None:
            raise ContractViolation("L_f requires a feature extractor")
        return loss_f(out, targets, cfg.weights, cfg.variant, fx)
    return loss_r(out, targets, cfg.weights, cfg.variant)


def _guard_finite(loss_value: float, model: Starnet) -> None:
    if np.isfinite(loss_value):
        return
    for _, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)):
            raise NumericalError(f"non-finite parameter tensor: {p.name}")
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient tensor: {p.name}")
    raise NumericalError("non-finite loss (inputs or intermediate activations)")


def train_step(model: Starnet, batch: dict, cfg: TrainConfig,
               opt: AdaMaxState, lr: float,
               fx: FeatureExtractor | None = None) -> float:
    params = list(model.parameters())
    zero_grad(params)
    loss = compute_loss(model, batch, cfg, fx)
    value = float(loss.data)
    _guard_finite(value, model)
    loss.backward()
    # variant masking: parameters feeding only inactive outputs get no
    # gradient and must not be stepped
    live = [p for p in params if p.grad is not None]
    adamax_step(live, opt, lr=lr)
    _guard_finite(float(np.sum([np.sum(p.data) for p in params])), model)
    return value


def _epoch_batches(index, cfg: TrainConfig, epoch: int, rng):
    """Load, crop/augment, and stack every batch of one epoch."""
    grid = cfg.variant.input_grid
    for ids in make_batches(index, cfg.batch, epoch):
        records = load_records(index, ids, cfg.model.scale, cfg.flow_source)
        prepped = []
        for rec in records:
            h, w = rec.hr_size
            pw, ph = cfg.batch.patch_lr
            s = cfg.model.scale
            if (ph * s, pw * s) != (h, w):
                spec = random_crop_spec(rng, (h, w), cfg.batch.patch_lr, s,
                                        augment=cfg.augment)
                rec = augment_triplet(rec, spec, s, cfg.flow_source)
            prepped.append(rec)
        yield stack_batch(prepped, grid)


def train(cfg: TrainConfig, index: DatasetIndex, out_dir=None, log=print,
          dry_run: bool = False, max_steps: int | None = None,
          epochs: int | None = None, save_every_epoch: bool = True):
    """Run the staircase learning-rate schedule; emits a checkpoint per
    epoch when out_dir is given and returns the final checkpoint."""
    model = Starnet(cfg.model)
    opt = AdaMaxState(learning_rate=cfg.lr_initial)
    fx = FeatureExtractor(cfg.model.seed) if cfg.loss_kind == "L_f" else None
    rng = np.random.default_rng(np.random.SeedSequence([cfg.batch.seed, 7]))
    total = cfg.epochs_total if epochs is None else epochs
    lr_log = []
    steps = 0
    for epoch in range(total):
        lr = schedule_lr(cfg.lr_initial, cfg.lr_decay_factor,
                         cfg.lr_decay_every, epoch)
        lr_log.append(lr)
        if dry_run:
            log(f"epoch {epoch} lr {lr:.6g} (dry run)")
            continue
        losses = []
        for batch in _epoch_batches(index, cfg, epoch, rng):
            losses.append(train_step(model, batch, cfg, opt, lr, fx))
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        log(f"epoch {epoch} lr {lr:.6g} loss {mean_loss:.6f}")
        if out_dir is not None and save_every_epoch:
            ckpt = model_to_checkpoint(model, opt, epoch,
                                       rng.bit_generator.state)
            save_checkpoint(ckpt, os.path.join(out_dir, f"epoch_{epoch:03d}.ckpt"))
        if max_steps is not None and steps >= max_steps:
            break
    ckpt = model_to_checkpoint(model, opt, total - 1, rng.bit_generator.state)
    if out_dir is not None:
        save_checkpoint(ckpt, os.path.join(out_dir, "final.ckpt"))
    ckpt.meta["lr_log"] = lr_log
    return ckpt


def finetune(base: Checkpoint, variant: VariantSpec, cfg: TrainConfig,
             index: DatasetIndex, out_dir=None, log=print,
             dry_run: bool = False, max_steps: int | None = None):
    """Continue from a base checkpoint with the variant's loss mask and the
    shorter decay schedule."""
    base_cfg = ModelConfig.from_dict(base.model_config)
    if (base_cfg.c_h, base_cfg.c_l, base_cfg.scale) != \
            (cfg.model.c_h, cfg.model.c_l, cfg.model.scale):
        raise ContractViolation(
            "finetune config mismatch with checkpoint: "
            f"(c_h,c_l,scale) {base_cfg.c_h, base_cfg.c_l, base_cfg.scale} vs "
            f"{cfg.model.c_h, cfg.model.c_l, cfg.model.scale}")
    model, opt = checkpoint_to_model(base)
    if opt is None:
        opt = AdaMaxState(learning_rate=cfg.lr_initial)
    fx = FeatureExtractor(cfg.model.seed) if cfg.loss_kind == "L_f" else None
    ft_cfg = replace(cfg, variant=variant, model=model.cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.batch.seed, 11]))
    lr_log = []
    steps = 0
    for epoch in range(cfg.finetune_epochs):
        lr = schedule_lr(cfg.lr_initial, cfg.lr_decay_factor,
                         cfg.finetune_decay_every, epoch)
        lr_log.append(lr)
        if dry_run:
            log(f"finetune epoch {epoch} lr {lr:.6g} (dry run)")
            continue
        losses = []
        for batch in _epoch_batches(index, ft_cfg, epoch, rng):
            losses.append(train_step(model, batch, ft_cfg, opt, lr, fx))
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        log(f"finetune epoch {epoch} lr {lr:.6g} "
            f"loss {float(np.mean(losses)) if losses else float('nan'):.6f}")
        if max_steps is not None and steps >= max_steps:
            break
    ckpt = model_to_checkpoint(model, opt, cfg.finetune_epochs - 1,
                               rng.bit_generator.state)
    ckpt.meta["variant"] = variant.name
    ckpt.meta["lr_log"] = lr_log
    if out_dir is not None:
        save_checkpoint(ckpt, os.path.join(out_dir, f"{variant.name}.ckpt"))
    return ckpt


# -- evaluation -------------------------------------------------------------

def evaluate(ckpt: Checkpoint, index: DatasetIndex,
             metrics=("psnr", "ssim"), report_path=None,
             flow_source: str = "estimate", log=print) -> dict:
    model, _ = checkpoint_to_model(ckpt)
    scale = model.cfg.scale
    sums = {out: {m: 0.0 for m in metrics} for out in
            ("I_sr_t", "I_sr_tn", "I_l_tn")}
    count = 0
    skipped = 0
    for i in range(len(index)):
        rec = data_mod.load_triplet(index, i, scale, flow_source)
        h, w = rec.hr_size
        if h % scale or w % scale:
            skipped += 1
            log(f"warning: skipping {index.entries[i]} ({h}x{w} not divisible "
                f"by {scale})")
            continue
        batch = stack_batch([rec])
        out = model.full_forward(batch["I_t"], batch["I_t1"],
                                 batch.get("F_fwd"), batch.get("F_bwd"))
        preds = {
            "I_sr_t": clamp01(out.I_sr_t)[0].transpose(1, 2, 0),
            "I_sr_tn": clamp01(out.I_sr_tn)[0].transpose(1, 2, 0),
            "I_l_tn": clamp01(out.I_l_tn)[0].transpose(1, 2, 0),
        }
        gts = {"I_sr_t": rec.hr_frames[0], "I_sr_tn": rec.hr_frames[1],
               "I_l_tn": rec.lr_frames[1]}
        for name in preds:
            if "psnr" in metrics:
                sums[name]["psnr"] += psnr(preds[name], gts[name])
            if "ssim" in metrics:
                sums[name]["ssim"] += ssim(preds[name], gts[name])
            if "ie" in metrics:
                sums[name]["ie"] += interp_error(preds[name], gts[name])
        count += 1
    if count == 0:
        raise ContractViolation("evaluation index had no usable entries")
    cfg_hash = hashlib.sha256(ckpt.config_blob()).hexdigest()[:16]
    report = {
        "dataset": {"root": index.root, "split": index.split,
                    "entries": len(index)},
        "config_hash": cfg_hash,
        "evaluated": count,
        "skipped": skipped,
        "outputs": {name: {m: round(sums[name][m] / count, 6) for m in metrics}
                    for name in sums},
    }
    if report_path is not None:
        with open(str(report_path) + ".json", "w") as f:
            json.dump(report, f, sort_keys=True, indent=2)
            f.write("\n")
        with open(str(report_path) + ".txt", "w") as f:
            f.write(format_report(report))
    return report


def format_report(report: dict) -> str:
    lines = [f"dataset: {report['dataset']['root']} "
             f"({report['dataset']['split']}, {report['evaluated']} evaluated, "
             f"{report['skipped']} skipped)",
             f"config:  {report['config_hash']}"]
    metrics = sorted(next(iter(report["outputs"].values())).keys())
    header = f"{'output':<10}" + "".join(f"{m:>10}" for m in metrics)
    lines.append(header)
    for name in ("I_sr_t", "I_sr_tn", "I_l_tn"):
        vals = report["outputs"][name]
        lines.append(f"{name:<10}" + "".join(f"{vals[m]:>10.4f}" for m in metrics))
    return "\n".join(lines) + "\n"


# -- inference --------------------------------------------------------------

def infer(ckpt: Checkpoint, frames_dir, out_dir, mode: str = "stsr",
          flow_cfg: FlowPyramidConfig = FlowPyramidConfig(), log=print):
    """stsr: each adjacent pair yields the upscaled frame and the upscaled
    in-between frame (2N-1 outputs).  cascade_t4: a second interpolation
    pass over the stsr outputs (4N-3 outputs)."""
    model, _ = checkpoint_to_model(ckpt)
    names = sorted(n for n in os.listdir(frames_dir) if n.endswith(".png"))
    if len(names) < 2:
        raise ContractViolation("infer requires at least 2 input frames")
    frames = [read_png(os.path.join(frames_dir, n)) for n in names]
    sr = _stsr_pass(model, frames, flow_cfg)
    if mode == "stsr":
        outputs = sr
    elif mode == "cascade_t4":
        outputs = _interleave_pass(model, sr, flow_cfg)
    else:
        raise ContractViolation(f"unknown infer mode {mode!r}")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for k, img in enumerate(outputs):
        path = os.path.join(out_dir, f"frame_{k:04d}.png")
        write_png(img, path)
        paths.append(path)
    log(f"wrote {len(paths)} frames to {out_dir}")
    return paths


def _pair_forward(model, a, b, flow_cfg):
    fwd = estimate_flow(a, b, flow_cfg)
    bwd = estimate_flow(b, a, flow_cfg)
    batch_a = np.transpose(a, (2, 0, 1))[None]
    batch_b = np.transpose(b, (2, 0, 1))[None]
    return model.full_forward(
        batch_a, batch_b,
        np.transpose(fwd, (2, 0, 1))[None], np.transpose(bwd, (2, 0, 1))[None])


def _stsr_pass(model, frames, flow_cfg):
    outputs = []
    for i in range(len(frames) - 1):
        out = _pair_forward(model, frames[i], frames[i + 1], flow_cfg)
        outputs.append(clamp01(out.I_sr_t)[0].transpose(1, 2, 0))
        outputs.append(clamp01(out.I_sr_tn)[0].transpose(1, 2, 0))
        if i == len(frames) - 2:
            outputs.append(clamp01(out.I_sr_t1)[0].transpose(1, 2, 0))
    return outputs


def _interleave_pass(model, frames, flow_cfg):
    """Temporal-only second pass: the in-between output on the input grid."""
    outputs = []
    for i in range(len(frames) - 1):
        out = _pair_forward(model, frames[i], frames[i + 1], flow_cfg)
        outputs.append(frames[i])
        outputs.append(clamp01(out.I_l_tn)[0].transpose(1, 2, 0))
    outputs.append(frames[-1])
    return outputs
