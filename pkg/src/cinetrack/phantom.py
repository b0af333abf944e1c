"""Synthetic cine phantom with exact ground truth.

A dark elliptical "vessel" moves over a smooth background with a
respiration-like surrogate motion. Optional extras: a second blob acting as a
distractor and a run of frames where the target vanishes (out-of-plane analog).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .imaging import BoundingBox, Frame, Sequence
from .metrics import GroundTruth
from .preprocess import smooth_array

PATTERNS = ("sinusoid", "sin4", "static")
_SUPERSAMPLE = 4


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Blob:
    axes: tuple[float, float] = (10.0, 7.0)
    contrast: float = 0.35
    # offset of the blob centre from the phantom base centre, px
    offset: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class PhantomConfig:
    width: int = 320
    height: int = 320
    n_frames: int = 50
    fps: float = 4.347
    spacing: float = 0.9
    amplitude: float = 10.0
    period: float = 4.0
    pattern: str = "sin4"
    target: Blob = field(default_factory=Blob)
    base: Optional[tuple[float, float]] = None
    noise_sigma: float = 0.03
    background: float = 0.55
    field_amplitude: float = 0.08
    # elliptical body (semi-axes as frame fractions) surrounded by dark air
    body: Optional[tuple[float, float]] = (0.46, 0.46)
    air: float = 0.05
    distractor: Optional[Blob] = None
    blank_frames: Optional[tuple[int, int]] = None
    seed: int = 1

    def __post_init__(self):
        if self.amplitude < 0:
            raise PhantomError("amplitude must be >= 0")
        if not self.period > 0:
            raise PhantomError("period must be > 0")
        if self.n_frames < 2:
            raise PhantomError("n_frames must be >= 2")
        if self.pattern not in PATTERNS:
            raise PhantomError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if not 0 <= self.target.contrast <= 1:
            raise PhantomError("target contrast must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise PhantomError("noise_sigma must be >= 0")

    @property
    def base_center(self) -> tuple[float, float]:
        if self.base is not None:
            return self.base
        return (self.width / 2.0, self.height / 2.0)

    def init_box(self, margin: float = 2.0) -> BoundingBox:
        """Integer box enclosing the frame-0 target with ``margin`` px each side."""
        cx, cy = self.base_center
        dx, dy = motion_model(0.0, self)
        ax, ay = self.target.axes
        x0 = math.floor(cx + dx - ax - margin)
        y0 = math.floor(cy + dy - ay - margin)
        x1 = math.ceil(cx + dx + ax + margin)
        y1 = math.ceil(cy + dy + ay + margin)
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)


def default_distractor() -> Blob:
    return Blob(axes=(6.0, 11.0), contrast=0.35, offset=(-70.0, 60.0))


def motion_model(t: float, cfg: PhantomConfig) -> tuple[float, float]:
    """Displacement (dx, dy) in px at time ``t`` seconds; y is the dominant axis."""
    if t < 0:
        raise PhantomError("t must be >= 0")
    a = cfg.amplitude
    if cfg.pattern == "static" or a == 0:
        return (0.0, 0.0)
    if cfg.pattern == "sinusoid":
        dy = a * math.sin(2.0 * math.pi * t / cfg.period)
    else:
        dy = a * math.sin(math.pi * t / cfg.period) ** 4
    return (0.3 * dy, dy)


def _coverage(h: int, w: int, cx: float, cy: float, ax: float, ay: float) -> np.ndarray:
    """Fractional ellipse coverage per pixel by regular supersampling."""
    cov = np.zeros((h, w))
    x0 = max(0, int(math.floor(cx - ax)) - 1)
    x1 = min(w, int(math.ceil(cx + ax)) + 2)
    y0 = max(0, int(math.floor(cy - ay)) - 1)
    y1 = min(h, int(math.ceil(cy + ay)) + 2)
    if x0 >= x1 or y0 >= y1:
        return cov
    s = _SUPERSAMPLE
    off = (np.arange(s) + 0.5) / s
    xs = (np.arange(x0, x1)[:, None] + off[None, :]).reshape(-1)
    ys = (np.arange(y0, y1)[:, None] + off[None, :]).reshape(-1)
    inside = ((xs[None, :] - cx) / ax) ** 2 + ((ys[:, None] - cy) / ay) ** 2 <= 1.0
    cov[y0:y1, x0:x1] = inside.reshape(y1 - y0, s, x1 - x0, s).mean(axis=(1, 3))
    return cov


def background_field(cfg: PhantomConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 7919])
    raw = rng.standard_normal((cfg.height, cfg.width))
    smooth = smooth_array(raw, 24.0)
    smooth /= max(np.abs(smooth).max(), 1e-12)
    field = cfg.background + cfg.field_amplitude * smooth
    if cfg.body is None:
        return field
    w, h = cfg.width, cfg.height
    inside = _coverage(h, w, w / 2.0, h / 2.0, cfg.body[0] * w, cfg.body[1] * h)
    inside = smooth_array(inside, 3.0)
    return cfg.air + (field - cfg.air) * inside


def _check_inside(cfg: PhantomConfig, k: int, cx: float, cy: float, blob: Blob, what: str):
    ax, ay = blob.axes
    if cx - ax < 0 or cy - ay < 0 or cx + ax > cfg.width or cy + ay > cfg.height:
        raise PhantomError(f"{what} leaves the frame at frame {k}")


def generate(cfg: PhantomConfig = PhantomConfig()) -> tuple[Sequence, GroundTruth]:
    bg = background_field(cfg)
    bx, by = cfg.base_center
    frames, centers, masks = [], [], []
    blank = range(*cfg.blank_frames) if cfg.blank_frames else range(0)
    for k in range(cfg.n_frames):
        t = k / cfg.fps
        dx, dy = motion_model(t, cfg)
        img = bg.copy()
        cx = bx + cfg.target.offset[0] + dx
        cy = by + cfg.target.offset[1] + dy
        _check_inside(cfg, k, cx, cy, cfg.target, "target")
        cov = _coverage(cfg.height, cfg.width, cx, cy, *cfg.target.axes)
        if k in blank:
            centers.append(None)
            masks.append(np.zeros((cfg.height, cfg.width), dtype=bool))
        else:
            img -= cfg.target.contrast * cov
            centers.append((cx, cy))
            masks.append(cov > 0.5)
        if cfg.distractor is not None:
            d = cfg.distractor
            ddx, ddy = bx + d.offset[0] + dx, by + d.offset[1] + dy
            _check_inside(cfg, k, ddx, ddy, d, "distractor")
            img -= d.contrast * _coverage(cfg.height, cfg.width, ddx, ddy, *d.axes)
        if cfg.noise_sigma > 0:
            rng = np.random.default_rng([cfg.seed, k])
            img += cfg.noise_sigma * rng.standard_normal(img.shape)
        frames.append(Frame(np.clip(img, 0.0, 1.0), (cfg.spacing, cfg.spacing), k, t))
    return Sequence(tuple(frames), cfg.fps), GroundTruth(centers, masks)


def noise_corpus(n: int = 200, sigma_range=(0.01, 0.12), seed: int = 11,
                 cfg: PhantomConfig = PhantomConfig()):
    """Frames of one phantom at mixed noise levels; returns (frames, sigmas)."""
    rng = np.random.default_rng(seed)
    sigmas = rng.uniform(*sigma_range, size=n)
    clean_cfg = replace(cfg, noise_sigma=0.0, n_frames=max(cfg.n_frames, 2))
    clean, _ = generate(clean_cfg)
    frames = []
    for k, s in enumerate(sigmas):
        base = clean[k % len(clean)].pixels
        noisy = base + s * np.random.default_rng([seed, k]).standard_normal(base.shape)
        frames.append(Frame(np.clip(noisy, 0.0, 1.0), clean[0].spacing, k, k / cfg.fps))
    return frames, sigmas
