"""Image-space kernels: bicubic resampling, augmentation, quantization, PNG I/O.

Images are H x W x 3 float arrays in [0, 1].  All public operations clamp
their output back into [0, 1] and are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .autodiff import ContractViolation


@dataclass(frozen=True)
class AugmentSpec:
    rotate_quarter_turns: int = 0        # clockwise quarter turns, 0..3
    flip_horizontal: bool = False
    flip_vertical: bool = False
    crop_origin: tuple = (0, 0)          # (row, col)
    crop_size: tuple | None = None       # (h, w); None = full image

    def validate(self, height: int, width: int, scale: int = 1) -> None:
        if self.rotate_quarter_turns not in (0, 1, 2, 3):
            raise ContractViolation("rotate_quarter_turns must be in {0,1,2,3}")
        r, c = self.crop_origin
        h, w = self.crop_size if self.crop_size is not None else (height, width)
        if r < 0 or c < 0 or r + h > height or c + w > width:
            raise ContractViolation("crop window out of image bounds")
        if h % scale or w % scale:
            raise ContractViolation("crop size must be divisible by the SR scale")


def cubic_kernel(x, a: float = -0.5):
    """Catmull-Rom family cubic interpolation kernel."""
    x = np.abs(x)
    x2 = x * x
    x3 = x2 * x
    return np.where(
        x <= 1.0,
        (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0,
        np.where(x < 2.0, a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a, 0.0),
    )


def _resize_weights(in_size: int, out_size: int):
    """Per-output-pixel source indices and cubic weights (MATLAB-style,
    anti-aliased when downscaling)."""
    scale = out_size / in_size
    kscale = min(scale, 1.0)             # widen the kernel when downscaling
    width = 4.0 / kscale
    u = (np.arange(out_size) + 0.5) / scale - 0.5
    left = np.floor(u - width / 2).astype(int) + 1
    nw = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(nw)[None, :]
    w = kscale * cubic_kernel(kscale * (u[:, None] - idx))
    w = w / w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_size - 1)   # replicate borders
    return idx, w


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ContractViolation("target size must be positive")
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    idx_r, w_r = _resize_weights(arr.shape[0], out_h)
    arr = np.einsum("ok,okwc->owc", w_r, arr[idx_r], optimize=True)
    idx_c, w_c = _resize_weights(arr.shape[1], out_w)
    arr = np.einsum("ok,hokc->hoc", w_c, arr[:, idx_c], optimize=True)
    arr = np.clip(arr, 0.0, 1.0).astype(np.float32)
    return arr[:, :, 0] if squeeze else arr


def apply_augment(img: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Crop, then flips, then clockwise quarter-turn rotation."""
    h, w = img.shape[:2]
    spec.validate(h, w)
    r, c = spec.crop_origin
    ch, cw = spec.crop_size if spec.crop_size is not None else (h, w)
    out = img[r:r + ch, c:c + cw]
    if spec.flip_horizontal:
        out = out[:, ::-1]
    if spec.flip_vertical:
        out = out[::-1, :]
    if spec.rotate_quarter_turns:
        out = np.rot90(out, k=-spec.rotate_quarter_turns)
    return np.ascontiguousarray(out)


def quantize_roundtrip(img: np.ndarray) -> np.ndarray:
    """Map each channel to the nearest of 256 levels and back; idempotent."""
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0)
    return (q / 255.0).astype(np.float32)


def luma(img: np.ndarray) -> np.ndarray:
    """BT.601 luma from an RGB image."""
    return (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2])


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except Exception as exc:
        raise IOError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def write_png(img: np.ndarray, path) -> None:
    arr = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
