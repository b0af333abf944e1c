"""Raster types, sequence I/O and patch sampling.

Coordinates follow the continuous-pixel convention: pixel ``(row i, col j)``
covers ``[j, j+1) x [i, i+1)`` so its centre sits at ``(j + 0.5, i + 0.5)``.
A box ``(x, y, w, h)`` therefore has centre ``(x + w/2, y + h/2)``.
Sub-pixel sampling works in *index* coordinates (continuous minus 0.5).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence as Seq

import numpy as np
from PIL import Image

MIN_SIDE = 16
IMAGE_NAME_RE = re.compile(r"^(\d{4})\.(pgm|png)$")


class ImagingError(ValueError):
    """Raised for malformed frames, sequences or sampling requests."""


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class Frame:
    pixels: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)
    index: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ImagingError(f"frame pixels must be 2-D, got shape {px.shape}")
        h, w = px.shape
        if w < MIN_SIDE or h < MIN_SIDE:
            raise ImagingError(f"frame is {w}x{h}; both sides must be >= {MIN_SIDE}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ImagingError("frame pixel values must lie in [0, 1]")
        sx, sy = (float(s) for s in self.spacing)
        if sx <= 0 or sy <= 0:
            raise ImagingError(f"spacing must be positive, got {self.spacing}")
        if px.flags.writeable:
            px = px.copy()
            px.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "spacing", (sx, sy))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> "Frame":
        """Same metadata, new raster (values are clipped to [0, 1])."""
        return Frame(np.clip(pixels, 0.0, 1.0), self.spacing, self.index, self.timestamp)


@dataclass(frozen=True)
class Sequence:
    frames: tuple[Frame, ...]
    fps: float

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ImagingError("sequence has no frames")
        if not self.fps > 0:
            raise ImagingError(f"fps must be positive, got {self.fps}")
        first = frames[0]
        for k, fr in enumerate(frames):
            if fr.index != k:
                raise ImagingError(f"frame indices must run 0..N-1, frame {k} has index {fr.index}")
            if fr.shape != first.shape or fr.spacing != first.spacing:
                raise ImagingError(f"frame {k} differs in size or spacing from frame 0")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, k: int) -> Frame:
        return self.frames[k]

    def __iter__(self):
        return iter(self.frames)

    @property
    def spacing(self) -> tuple[float, float]:
        return self.frames[0].spacing

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape

    @classmethod
    def from_arrays(cls, arrays: Iterable[np.ndarray], spacing=(1.0, 1.0), fps: float = 1.0):
        frames = tuple(
            Frame(a, spacing, k, k / fps) for k, a in enumerate(arrays)
        )
        return cls(frames, fps)


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ImagingError(f"box extents must be positive, got {self.w}x{self.h}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def rounded(self) -> tuple[int, int, int, int]:
        return (round_half_up(self.x), round_half_up(self.y),
                round_half_up(self.w), round_half_up(self.h))

    def in_frame(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x + dx, self.y + dy, self.w, self.h)

    def scaled(self, s: float) -> "BoundingBox":
        """Scale about the box centre."""
        cx, cy = self.center
        w, h = self.w * s, self.h * s
        return BoundingBox(cx - w / 2.0, cy - h / 2.0, w, h)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_many(box: BoundingBox, boxes: np.ndarray) -> np.ndarray:
    """IoU of one box against an (N, 4) array of ``x, y, w, h`` rows."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x0 = np.maximum(box.x, boxes[:, 0])
    y0 = np.maximum(box.y, boxes[:, 1])
    x1 = np.minimum(box.x + box.w, boxes[:, 0] + boxes[:, 2])
    y1 = np.minimum(box.y + box.h, boxes[:, 1] + boxes[:, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    return inter / (box.area + boxes[:, 2] * boxes[:, 3] - inter)


@dataclass(frozen=True)
class NormalizedPatch:
    side: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.size != self.side * self.side:
            raise ImagingError(f"patch has {v.size} values, expected {self.side ** 2}")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def as_image(self) -> np.ndarray:
        return self.values.reshape(self.side, self.side)


# ---------------------------------------------------------------- sampling

def bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup at index coordinates with edge replication."""
    h, w = img.shape
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1.0)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2 if w > 1 else 0)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2 if h > 1 else 0)
    ax = xs - x0
    ay = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1 - ax) + img[y1, x1] * ax
    return top * (1 - ay) + bot * ay


def patch_grid(x: float, y: float, w: float, h: float, side: int) -> tuple[np.ndarray, np.ndarray]:
    """Index-space sample positions of a side x side resampling of a box."""
    t = (np.arange(side) + 0.5) / side
    xs = x + t * w - 0.5
    ys = y + t * h - 0.5
    return np.meshgrid(xs, ys)


def crop_patch(frame: Frame, box: BoundingBox) -> np.ndarray:
    x, y, w, h = box.rounded()
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > frame.width or y + h > frame.height:
        raise ImagingError(f"box {box.as_tuple()} is not inside the {frame.width}x{frame.height} frame")
    return frame.pixels[y:y + h, x:x + w].copy()


def resample_normalize(patch: np.ndarray, side: int) -> NormalizedPatch:
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or patch.size == 0:
        raise ImagingError("patch must be a non-empty 2-D raster")
    if side < 4:
        raise ImagingError(f"normalized side must be >= 4, got {side}")
    h, w = patch.shape
    if (h, w) == (side, side):
        vals = patch
    else:
        gx, gy = patch_grid(0.0, 0.0, w, h, side)
        vals = bilinear(patch, gx, gy)
    return NormalizedPatch(side, vals - vals.mean())


def sample_patch(img: np.ndarray, box: BoundingBox, side: int) -> NormalizedPatch:
    """Bilinear side x side sampling of a (possibly fractional) box, mean removed.

    For integer boxes this equals ``resample_normalize(crop_patch(...))``.
    """
    gx, gy = patch_grid(box.x, box.y, box.w, box.h, side)
    vals = bilinear(img, gx, gy)
    return NormalizedPatch(side, vals - vals.mean())


# --------------------------------------------------------------------- I/O

def read_gray8(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ImagingError(f"{path.name}: expected 8-bit grayscale, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


def write_gray8(path: Path, arr: np.ndarray) -> None:
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        a = np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="L").save(path)


def to_gray8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)


def load_sequence(directory, meta: str | Path | None = None) -> Sequence:
    """Load ``NNNN.pgm|png`` frames plus ``meta.json`` from a directory."""
    d = Path(directory)
    if not d.is_dir():
        raise ImagingError(f"sequence directory {d} does not exist")
    meta_path = Path(meta) if meta is not None else d / "meta.json"
    if not meta_path.is_file():
        raise ImagingError(f"missing metadata file {meta_path}")
    try:
        md = json.loads(meta_path.read_text(encoding="utf-8"))
        spacing = (float(md["spacing_mm_x"]), float(md["spacing_mm_y"]))
        fps = float(md["fps"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ImagingError(f"bad metadata in {meta_path}: {exc}") from exc

    files = sorted(
        (int(m.group(1)), p) for p in d.iterdir() if (m := IMAGE_NAME_RE.match(p.name))
    )
    if not files:
        raise ImagingError(f"no NNNN.pgm/png frames in {d}")
    frames = []
    shape = None
    for k, (num, path) in enumerate(files):
        arr = read_gray8(path)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ImagingError(
                f"{path.name} is {arr.shape[1]}x{arr.shape[0]}, expected {shape[1]}x{shape[0]}"
            )
        frames.append(Frame(arr / 255.0, spacing, k, k / fps))
    return Sequence(tuple(frames), fps)


def save_sequence(seq: Sequence, directory, ext: str = "png") -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for fr in seq:
        p = d / f"{fr.index:04d}.{ext}"
        write_gray8(p, to_gray8(fr.pixels))
        paths.append(p)
    meta = {"spacing_mm_x": seq.spacing[0], "spacing_mm_y": seq.spacing[1], "fps": seq.fps}
    (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return paths


def box_from_string(text: str) -> BoundingBox:
    try:
        parts = [float(t) for t in text.split(",")]
    except ValueError as exc:
        raise ImagingError(f"bad box {text!r}; expected x,y,w,h") from exc
    if len(parts) != 4:
        raise ImagingError(f"bad box {text!r}; expected x,y,w,h")
    return BoundingBox(*parts)


def stack_pixels(frames: Seq[Frame]) -> np.ndarray:
    return np.stack([f.pixels for f in frames])
