"""Triplet dataset indexing, loading, augmentation, and batching.

Directory layout: <root>/sequences/<clip>/<seq>/im{1,2,3}.png with list
files of relative <clip>/<seq> paths.  Low-resolution frames are derived
from the originals by bicubic downscaling; flows either come from a
pyramidal estimator on the LR frames or from sibling .flo files under
<root>/flows/<clip>/<seq>/.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ContractViolation
from .flow import FlowPyramidConfig, estimate_flow, read_flo
from .image import AugmentSpec, apply_augment, bicubic_resize, read_png

FLOW_FILES = ("fwd", "bwd", "t_tn", "tn_t1", "t1_tn", "tn_t")

THREADS_ENV = "STARNET_DATA_THREADS"


class DatasetError(RuntimeError):
    """Configuration or I/O problem with a dataset."""


@dataclass(frozen=True)
class DatasetIndex:
    root: str
    entries: tuple
    split: str = "train"

    def __len__(self):
        return len(self.entries)

    def sequence_dir(self, i: int) -> str:
        return os.path.join(self.root, "sequences", self.entries[i])

    def flow_dir(self, i: int) -> str:
        return os.path.join(self.root, "flows", self.entries[i])


@dataclass
class TripletRecord:
    hr_frames: tuple      # (I_t, I_tn, I_t1), each H x W x 3
    lr_frames: tuple      # derived by bicubic /scale
    flows: dict           # keys from FLOW_FILES present per split/mode

    @property
    def hr_size(self):
        return self.hr_frames[0].shape[:2]


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 10
    patch_lr: tuple = (112, 64)   # (width, height) on the LR grid
    seed: int = 0
    shuffle: bool = True


def scan_dataset(root, list_file, split: str = "train") -> DatasetIndex:
    if not os.path.isdir(root):
        raise DatasetError(f"dataset root {root!r} is not a directory")
    try:
        with open(list_file) as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read list file {list_file}: {exc}") from exc
    entries = []
    for lineno, line in enumerate(lines, 1):
        rel = line.strip()
        if not rel:
            continue
        seq_dir = os.path.join(root, "sequences", rel)
        for name in ("im1.png", "im2.png", "im3.png"):
            if not os.path.isfile(os.path.join(seq_dir, name)):
                raise DatasetError(
                    f"{list_file}:{lineno}: missing {name} under {seq_dir}")
        entries.append(rel)
    if not entries:
        raise DatasetError(f"empty dataset index from {list_file}")
    return DatasetIndex(root=str(root), entries=tuple(entries), split=split)


def _estimate_record_flows(lr, split, flow_cfg):
    I_t, I_tn, I_t1 = lr
    flows = {
        "fwd": estimate_flow(I_t, I_t1, flow_cfg),
        "bwd": estimate_flow(I_t1, I_t, flow_cfg),
    }
    if split == "train":
        flows["t_tn"] = estimate_flow(I_t, I_tn, flow_cfg)
        flows["tn_t1"] = estimate_flow(I_tn, I_t1, flow_cfg)
        flows["t1_tn"] = estimate_flow(I_t1, I_tn, flow_cfg)
        flows["tn_t"] = estimate_flow(I_tn, I_t, flow_cfg)
    return flows


def load_triplet(index: DatasetIndex, i: int, scale: int = 4,
                 flow_source: str = "estimate",
                 flow_cfg: FlowPyramidConfig = FlowPyramidConfig()) -> TripletRecord:
    if i >= len(index):
        raise ContractViolation(f"triplet index {i} out of range")
    seq_dir = index.sequence_dir(i)
    hr = tuple(read_png(os.path.join(seq_dir, f"im{k}.png")) for k in (1, 2, 3))
    h, w = hr[0].shape[:2]
    lr = tuple(bicubic_resize(im, h // scale, w // scale) for im in hr)
    if flow_source == "estimate":
        flows = _estimate_record_flows(lr, index.split, FlowPyramidConfig()
                                       if flow_cfg is None else flow_cfg)
    elif flow_source == "flo_dir":
        flow_dir = index.flow_dir(i)
        names = FLOW_FILES if index.split == "train" else FLOW_FILES[:2]
        flows = {}
        for name in names:
            path = os.path.join(flow_dir, name + ".flo")
            if not os.path.isfile(path):
                raise DatasetError(f"missing flow file {path}")
            flows[name] = read_flo(path)
    else:
        raise ContractViolation(f"unknown flow_source {flow_source!r}")
    return TripletRecord(hr_frames=hr, lr_frames=lr, flows=flows)


def transform_flow(flow: np.ndarray, spec: AugmentSpec, scale: int) -> np.ndarray:
    """Apply the raster transform of an HR-crop AugmentSpec to an LR flow
    field, rotating/flipping the vectors with the raster."""
    r, c = spec.crop_origin
    if spec.crop_size is not None:
        ch, cw = spec.crop_size
        out = flow[r // scale:(r + ch) // scale, c // scale:(c + cw) // scale]
    else:
        out = flow
    out = out.copy()
    if spec.flip_horizontal:
        out = out[:, ::-1].copy()
        out[..., 0] = -out[..., 0]
    if spec.flip_vertical:
        out = out[::-1, :].copy()
        out[..., 1] = -out[..., 1]
    for _ in range(spec.rotate_quarter_turns):
        out = np.rot90(out, k=-1).copy()
        u = out[..., 0].copy()
        out[..., 0] = -out[..., 1]
        out[..., 1] = u
    return np.ascontiguousarray(out)


def augment_triplet(rec: TripletRecord, spec: AugmentSpec, scale: int = 4,
                    flow_mode: str = "estimate",
                    flow_cfg: FlowPyramidConfig = FlowPyramidConfig()) -> TripletRecord:
    """Same geometric transform on all HR frames; LR frames re-derived;
    flows re-estimated (estimate mode) or transformed analytically."""
    h, w = rec.hr_size
    spec.validate(h, w, scale)
    r, c = spec.crop_origin
    if r % scale or c % scale:
        raise ContractViolation("crop origin must lie on the scale grid")
    hr = tuple(apply_augment(im, spec) for im in rec.hr_frames)
    nh, nw = hr[0].shape[:2]
    lr = tuple(bicubic_resize(im, nh // scale, nw // scale) for im in hr)
    if flow_mode == "estimate":
        split = "train" if len(rec.flows) == len(FLOW_FILES) else "test"
        flows = _estimate_record_flows(lr, split, flow_cfg)
    else:
        flows = {k: transform_flow(f, spec, scale) for k, f in rec.flows.items()}
    return TripletRecord(hr_frames=hr, lr_frames=lr, flows=flows)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle order as a pure function of (seed, epoch)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    return rng.permutation(n)


def make_batches(index: DatasetIndex, spec: BatchSpec, epoch: int = 0):
    """Deterministic sequence of index batches.  The final partial batch is
    dropped for the training split and kept for evaluation."""
    order = (epoch_permutation(len(index), spec.seed, epoch) if spec.shuffle
             else np.arange(len(index)))
    batches = []
    for start in range(0, len(order), spec.batch_size):
        chunk = order[start:start + spec.batch_size]
        if len(chunk) < spec.batch_size and index.split == "train":
            break
        batches.append(tuple(int(j) for j in chunk))
    return batches


def random_crop_spec(rng: np.random.Generator, hr_size, patch_lr, scale,
                     augment: bool = True) -> AugmentSpec:
    """Crop origin uniform on the scale-aligned grid; optional flips and a
    quarter-turn rotation."""
    h, w = hr_size
    pw, ph = patch_lr
    ch, cw = ph * scale, pw * scale
    if ch > h or cw > w:
        raise ContractViolation("patch larger than the source frame")
    r = int(rng.integers(0, (h - ch) // scale + 1)) * scale
    c = int(rng.integers(0, (w - cw) // scale + 1)) * scale
    if augment:
        return AugmentSpec(rotate_quarter_turns=0 if ch != cw else int(rng.integers(0, 4)),
                           flip_horizontal=bool(rng.integers(0, 2)),
                           flip_vertical=bool(rng.integers(0, 2)),
                           crop_origin=(r, c), crop_size=(ch, cw))
    return AugmentSpec(crop_origin=(r, c), crop_size=(ch, cw))


def stack_batch(records, input_grid: str = "lr") -> dict:
    """Assemble NCHW arrays for one batch of (possibly augmented) records.

    input_grid 'hr' feeds the original frames as network inputs (the
    HR-regime temporal fine-tune); its 'LR ground truth' is then the HR
    middle frame, and flow legs are unavailable.
    """
    def frames(key, k):
        return np.stack([np.transpose(getattr(r, key)[k], (2, 0, 1))
                         for r in records]).astype(np.float32)

    if input_grid == "hr":
        from .flow import resize_flow
        h, w = records[0].hr_frames[0].shape[:2]

        def hr_flows(key):
            if not all(key in r.flows for r in records):
                return None
            return np.stack([np.transpose(resize_flow(r.flows[key], h, w), (2, 0, 1))
                             for r in records]).astype(np.float32)

        return {
            "I_t": frames("hr_frames", 0), "I_t1": frames("hr_frames", 2),
            "hr_t": None, "hr_tn": None, "hr_t1": None,
            "lr_tn": frames("hr_frames", 1),
            "F_fwd": hr_flows("fwd"), "F_bwd": hr_flows("bwd"),
            "t_tn": None, "tn_t1": None, "t1_tn": None, "tn_t": None,
        }
    batch = {
        "I_t": frames("lr_frames", 0), "I_t1": frames("lr_frames", 2),
        "hr_t": frames("hr_frames", 0), "hr_tn": frames("hr_frames", 1),
        "hr_t1": frames("hr_frames", 2), "lr_tn": frames("lr_frames", 1),
    }
    def flows(key):
        if all(key in r.flows for r in records):
            return np.stack([np.transpose(r.flows[key], (2, 0, 1))
                             for r in records]).astype(np.float32)
        return None
    for key in FLOW_FILES:
        batch["F_" + key if key in ("fwd", "bwd") else key] = flows(key)
    return batch


def load_records(index: DatasetIndex, ids, scale=4, flow_source="estimate",
                 flow_cfg=FlowPyramidConfig()):
    """Fetch records concurrently (thread count from the environment),
    reassembled in order."""
    workers = max(1, int(os.environ.get(THREADS_ENV, "1")))
    if workers == 1:
        return [load_triplet(index, i, scale, flow_source, flow_cfg) for i in ids]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(
            lambda i: load_triplet(index, i, scale, flow_source, flow_cfg), ids))
