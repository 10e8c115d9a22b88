"""Optical flow: representation, pyramidal estimator stand-in, .flo I/O,
composition, and resampling.

A flow field is an H x W x 2 float32 array of (u, v) = (dcol, drow)
displacements from the source frame to the target frame (Middlebury
convention).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractViolation
from .image import luma

FLO_MAGIC = 202021.25


class FlowFormatError(ValueError):
    """Malformed .flo container."""


@dataclass(frozen=True)
class FlowPyramidConfig:
    levels: int = 3
    scale_per_level: float = 0.5
    iterations_per_level: int = 3
    smoothness_weight: float = 0.02
    jacobi_sweeps: int = 60


# -- container I/O ----------------------------------------------------------

def write_flo(flow: np.ndarray, path) -> None:
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) < 12:
            raise FlowFormatError(f"{path}: truncated header")
        magic, w, h = struct.unpack("<fii", header)
        if magic != FLO_MAGIC:
            raise FlowFormatError(f"{path}: bad magic {magic!r}")
        payload = f.read(h * w * 2 * 4)
        if len(payload) != h * w * 2 * 4:
            raise FlowFormatError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).copy()


# -- arithmetic -------------------------------------------------------------

def compose_flows(f_ab: np.ndarray, f_bc: np.ndarray) -> np.ndarray:
    """Per-pixel vector addition of two flow fields."""
    if f_ab.shape != f_bc.shape:
        raise ContractViolation("compose_flows: dimension mismatch")
    return f_ab + f_bc


def _bilinear_resize_2ch(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[:2]
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    a = arr[y0][:, x0] * (1 - wy) * (1 - wx) + arr[y0][:, x1] * (1 - wy) * wx \
        + arr[y1][:, x0] * wy * (1 - wx) + arr[y1][:, x1] * wy * wx
    return a.astype(arr.dtype)


def resize_flow(flow: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample; vectors rescaled so displacements stay metric."""
    if out_h < 1 or out_w < 1:
        raise ContractViolation("resize_flow: target size must be positive")
    h, w = flow.shape[:2]
    if (out_h, out_w) == (h, w):
        return flow.copy()
    out = _bilinear_resize_2ch(flow, out_h, out_w)
    out[..., 0] *= out_w / w
    out[..., 1] *= out_h / h
    return out


def warp_image(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward-warp: out(p) = img(p + flow(p)), bilinear, border clamped."""
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    sx = xx + flow[..., 0]
    sy = yy + flow[..., 1]
    x0 = np.clip(np.floor(sx).astype(int), 0, w - 1)
    y0 = np.clip(np.floor(sy).astype(int), 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    fx = np.clip(sx - x0, 0.0, 1.0)
    fy = np.clip(sy - y0, 0.0, 1.0)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    return (img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x1] * (1 - fy) * fx
            + img[y1, x0] * fy * (1 - fx) + img[y1, x1] * fy * fx)


# -- estimation stand-in ----------------------------------------------------

def _gradients(a: np.ndarray):
    gy, gx = np.gradient(a)
    return gx, gy


def _hs_increment(src, dst_w, alpha, sweeps):
    """One linearized smoothness-regularized solve for the flow increment."""
    avg = (src + dst_w) * 0.5
    ix, iy = _gradients(avg)
    it = dst_w - src
    denom = alpha + ix * ix + iy * iy
    du = np.zeros_like(src)
    dv = np.zeros_like(src)
    for _ in range(sweeps):
        du_bar = _neighbor_avg(du)
        dv_bar = _neighbor_avg(dv)
        common = (ix * du_bar + iy * dv_bar + it) / denom
        du = du_bar - ix * common
        dv = dv_bar - iy * common
    return du, dv


def _neighbor_avg(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1, mode="edge")
    return 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])


def estimate_flow(src: np.ndarray, dst: np.ndarray,
                  cfg: FlowPyramidConfig = FlowPyramidConfig()) -> np.ndarray:
    """Coarse-to-fine incremental estimate of the flow src -> dst."""
    if src.shape != dst.shape:
        raise ContractViolation("estimate_flow: frames differ in size")
    a = luma(src).astype(np.float64) if src.ndim == 3 else src.astype(np.float64)
    b = luma(dst).astype(np.float64) if dst.ndim == 3 else dst.astype(np.float64)
    h, w = a.shape

    sizes = [(h, w)]
    for _ in range(1, cfg.levels):
        nh = int(round(sizes[-1][0] * cfg.scale_per_level))
        nw = int(round(sizes[-1][1] * cfg.scale_per_level))
        if nh < 8 or nw < 8:
            break
        sizes.append((nh, nw))

    flow = np.zeros(sizes[-1] + (2,), dtype=np.float64)
    for lh, lw in reversed(sizes):
        sa = _bilinear_resize_2ch(a[:, :, None], lh, lw)[:, :, 0] if (lh, lw) != (h, w) else a
        sb = _bilinear_resize_2ch(b[:, :, None], lh, lw)[:, :, 0] if (lh, lw) != (h, w) else b
        if flow.shape[:2] != (lh, lw):
            flow = resize_flow(flow.astype(np.float32), lh, lw).astype(np.float64)
        for _ in range(cfg.iterations_per_level):
            sb_w = warp_image(sb, flow)
            du, dv = _hs_increment(sa, sb_w, cfg.smoothness_weight, cfg.jacobi_sweeps)
            flow[..., 0] += du
            flow[..., 1] += dv
    return flow.astype(np.float32)
