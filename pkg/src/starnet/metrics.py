"""Evaluation metrics: PSNR, single-scale SSIM, and interpolation error."""

from __future__ import annotations

import numpy as np

from .autodiff import ContractViolation
from .image import luma

PSNR_CAP_DB = 100.0


def psnr(pred: np.ndarray, gt: np.ndarray, mode: str = "rgb") -> float:
    if pred.shape != gt.shape:
        raise ContractViolation("psnr: size mismatch")
    if mode == "luma":
        pred, gt = luma(pred), luma(gt)
    elif mode != "rgb":
        raise ContractViolation(f"psnr: unknown mode {mode!r}")
    mse = float(np.mean((pred.astype(np.float64) - gt.astype(np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1-D window along both axes."""
    from numpy.lib.stride_tricks import sliding_window_view
    t = sliding_window_view(img, len(k), axis=0) @ k
    return sliding_window_view(t, len(k), axis=1) @ k


def ssim(pred: np.ndarray, gt: np.ndarray, window: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM on luma, Gaussian window, dynamic range 1.0."""
    if pred.shape != gt.shape:
        raise ContractViolation("ssim: size mismatch")
    a = luma(pred).astype(np.float64) if pred.ndim == 3 else pred.astype(np.float64)
    b = luma(gt).astype(np.float64) if gt.ndim == 3 else gt.astype(np.float64)
    if min(a.shape) < window:
        raise ContractViolation("ssim: image smaller than the window")
    k = _gaussian_window(window, sigma)
    c1 = k1 * k1
    c2 = k2 * k2
    mu1 = _filter_valid(a, k)
    mu2 = _filter_valid(b, k)
    s11 = _filter_valid(a * a, k) - mu1 * mu1
    s22 = _filter_valid(b * b, k) - mu2 * mu2
    s12 = _filter_valid(a * b, k) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def interp_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """RMS difference over 8-bit-scaled luma (Middlebury IE)."""
    if pred.shape != gt.shape:
        raise ContractViolation("interp_error: size mismatch")
    d = 255.0 * (luma(pred).astype(np.float64) - luma(gt).astype(np.float64))
    return float(np.sqrt(np.mean(d * d)))
