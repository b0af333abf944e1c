"""Per-frame enhancement: percentile gray normalization, gamma, Gaussian smoothing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .imaging import Frame


@dataclass(frozen=True)
class PreprocessConfig:
    low_pct: float = 1.0
    high_pct: float = 99.0
    gamma: float = 0.8
    sigma: float = 0.7

    def __post_init__(self):
        if not (0.0 <= self.low_pct < self.high_pct <= 100.0):
            raise ValueError(f"need 0 <= low_pct < high_pct <= 100, got {self.low_pct}, {self.high_pct}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


IDENTITY = PreprocessConfig(0.0, 100.0, 1.0, 0.0)


def normalize_gray(frame: Frame, low_pct: float = 1.0, high_pct: float = 99.0) -> Frame:
    px = frame.pixels
    lo, hi = np.percentile(px, [low_pct, high_pct])
    if hi <= lo:
        return frame.with_pixels(np.zeros_like(px))
    # a subnormal spread may overflow to inf; clipping still gives the stretch
    with np.errstate(over="ignore"):
        return frame.with_pixels(np.clip((px - lo) / (hi - lo), 0.0, 1.0))


def gamma_correct(frame: Frame, gamma: float) -> Frame:
    if gamma == 1.0:
        return frame
    return frame.with_pixels(np.power(frame.pixels, gamma))


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore"):  # tiny sigma: off-centre taps become exactly 0
        k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def smooth_array(px: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian, radius ceil(3 sigma), edge replication."""
    if sigma == 0:
        return np.array(px, dtype=np.float64, copy=True)
    k = gaussian_kernel(sigma)
    out = correlate1d(np.asarray(px, dtype=np.float64), k, axis=0, mode="nearest")
    return correlate1d(out, k, axis=1, mode="nearest")


def gaussian_smooth(frame: Frame, sigma: float) -> Frame:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return frame
    return frame.with_pixels(smooth_array(frame.pixels, sigma))


def preprocess(frame: Frame, cfg: PreprocessConfig = PreprocessConfig()) -> Frame:
    out = normalize_gray(frame, cfg.low_pct, cfg.high_pct)
    out = gamma_correct(out, cfg.gamma)
    return gaussian_smooth(out, cfg.sigma)
