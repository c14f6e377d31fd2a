"""PSNR / SSIM and the per-run metrics record."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(ref, test):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ShapeError(f"shape mismatch: {ref.shape} vs {test.shape}")
    return ref, test


def psnr(ref, test, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``PSNR_CAP``."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    ref, test = _pair(ref, test)
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(ref, test, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over every fully contained 11x11 Gaussian window."""
    ref, test = _pair(ref, test)
    if ref.ndim != 2:
        raise ShapeError("ssim expects 2-D images")
    if min(ref.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    win = gaussian_window()
    pad = SSIM_WINDOW // 2

    def filt(a):
        return ndimage.correlate(a, win, mode="constant")[pad:-pad, pad:-pad]

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = filt(ref), filt(test)
    sxx = filt(ref * ref) - mu_x**2
    syy = filt(test * test) - mu_y**2
    sxy = filt(ref * test) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(ref, test, data_range: float = 1.0) -> float:
    return float(np.clip(ssim_map(ref, test, data_range).mean(), -1.0, 1.0))


OUTPUTS = ("F", "H", "ens")


@dataclass
class MetricsRecord:
    """Per-image PSNR/SSIM for the F-only, extractor-only and ensemble outputs.

    ``available`` is False when the split has no clean references; the
    metric lists are then empty.
    """

    run_id: str = ""
    ablation_flags: frozenset = frozenset()
    gamma: float = 0.5
    epoch: int | None = None
    psnr: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in OUTPUTS})
    ssim: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in OUTPUTS})
    available: bool = True

    def add(self, output: str, ref, test, data_range: float = 1.0):
        self.psnr[output].append(psnr(ref, test, data_range))
        self.ssim[output].append(ssim(ref, test, data_range))

    def mean(self, output: str = "ens", metric: str = "psnr") -> float | None:
        vals = getattr(self, metric)[output]
        return float(np.mean(vals)) if vals else None

    def std(self, output: str = "ens", metric: str = "psnr") -> float | None:
        vals = getattr(self, metric)[output]
        return float(np.std(vals)) if vals else None
