"""Two-phase Chan-Vese segmentation by exact single-pixel label flips.

Energy of a binary mask M over image I:

    E = mu * P(M) + nu * |M| + l1 * sum_in (I - c1)^2 + l2 * sum_out (I - c2)^2

with P the number of 4-neighbour pixel pairs whose labels differ and c1, c2
the current region means (0 for an empty region). A sweep visits pixels in
raster order and flips a label whenever that alone lowers E.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .imaging import BoundingBox

# a flip must lower the energy by more than this to be accepted
FLIP_EPS = 1e-12


@dataclass(frozen=True)
class CvParams:
    mu: float = 0.05
    nu: float = 0.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    max_iters: int = 20
    tol: float = 0.001
    band: int = 10

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError("lambda1 and lambda2 must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 <= self.tol < 1:
            raise ValueError("tol must lie in [0, 1)")
        if self.band < 0:
            raise ValueError("band must be >= 0")


@dataclass
class SegResult:
    mask: np.ndarray
    energy: float
    iters_used: int
    c1: float
    c2: float
    degenerate: bool = False
    window: tuple = (0, 0, 0, 0)

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


def init_mask(box: BoundingBox, frame_dims) -> np.ndarray:
    """Filled ellipse inscribed in ``box``; pixels whose centres fall inside."""
    width, height = frame_dims
    cx, cy = box.center
    a, b = box.w / 2.0, box.h / 2.0
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    return ((xs[None, :] - cx) / a) ** 2 + ((ys[:, None] - cy) / b) ** 2 <= 1.0


@dataclass(frozen=True)
class EnergyTerms:
    energy: float
    perimeter: int
    area: int
    c1: float
    c2: float
    degenerate: bool


def perimeter(mask: np.ndarray) -> int:
    m = np.asarray(mask, dtype=bool)
    return int(np.count_nonzero(m[1:, :] != m[:-1, :]) + np.count_nonzero(m[:, 1:] != m[:, :-1]))


def energy_terms(img: np.ndarray, mask: np.ndarray, params: CvParams = CvParams()) -> EnergyTerms:
    img = np.asarray(img, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if m.shape != img.shape:
        raise ValueError(f"mask shape {m.shape} differs from image shape {img.shape}")
    inside = img[m]
    outside = img[~m]
    c1 = float(inside.mean()) if inside.size else 0.0
    c2 = float(outside.mean()) if outside.size else 0.0
    p = perimeter(m)
    fit = params.lambda1 * float(((inside - c1) ** 2).sum()) + params.lambda2 * float(((outside - c2) ** 2).sum())
    e = params.mu * p + params.nu * inside.size + fit
    return EnergyTerms(e, p, int(inside.size), c1, c2, inside.size == 0 or outside.size == 0)


def energy(img: np.ndarray, mask: np.ndarray, params: CvParams = CvParams()) -> float:
    return energy_terms(img, mask, params).energy


@njit(cache=True)
def _sse_add(n, c, v):
    # change in the sum of squared deviations when v joins a set of n with mean c
    if n == 0:
        return 0.0
    d = v - c
    return n / (n + 1.0) * d * d


@njit(cache=True)
def _sse_remove(n, c, v):
    if n <= 1:
        return 0.0
    d = v - c
    return -n / (n - 1.0) * d * d


@njit(cache=True)
def _sweep(img, lab, mu, nu, l1, l2, eps):
    h, w = img.shape
    n1 = 0
    s1 = 0.0
    s2 = 0.0
    for y in range(h):
        for x in range(w):
            if lab[y, x]:
                n1 += 1
                s1 += img[y, x]
            else:
                s2 += img[y, x]
    n2 = h * w - n1
    c1 = s1 / n1 if n1 > 0 else 0.0
    c2 = s2 / n2 if n2 > 0 else 0.0
    changed = 0
    for y in range(h):
        for x in range(w):
            v = img[y, x]
            cur = lab[y, x]
            dp = 0
            if y > 0:
                dp += 1 if lab[y - 1, x] == cur else -1
            if y < h - 1:
                dp += 1 if lab[y + 1, x] == cur else -1
            if x > 0:
                dp += 1 if lab[y, x - 1] == cur else -1
            if x < w - 1:
                dp += 1 if lab[y, x + 1] == cur else -1
            if cur:
                dfit = l1 * _sse_remove(n1, c1, v) + l2 * _sse_add(n2, c2, v)
                de = mu * dp - nu + dfit
            else:
                dfit = l1 * _sse_add(n1, c1, v) + l2 * _sse_remove(n2, c2, v)
                de = mu * dp + nu + dfit
            if de < -eps:
                if cur:
                    lab[y, x] = 0
                    n1 -= 1
                    s1 -= v
                    n2 += 1
                    s2 += v
                else:
                    lab[y, x] = 1
                    n1 += 1
                    s1 += v
                    n2 -= 1
                    s2 -= v
                c1 = s1 / n1 if n1 > 0 else 0.0
                c2 = s2 / n2 if n2 > 0 else 0.0
                changed += 1
    return changed


def cv_sweep(img: np.ndarray, mask: np.ndarray, params: CvParams = CvParams()) -> tuple[np.ndarray, int]:
    """One raster pass of energy-lowering flips over the whole of ``img``."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    lab = np.ascontiguousarray(mask, dtype=np.uint8).copy()
    if lab.shape != img.shape:
        raise ValueError(f"mask shape {lab.shape} differs from image shape {img.shape}")
    changed = _sweep(img, lab, params.mu, params.nu, params.lambda1, params.lambda2, FLIP_EPS)
    return lab.astype(bool), int(changed)


def minimize(img: np.ndarray, mask: np.ndarray, params: CvParams = CvParams()) -> tuple[np.ndarray, int]:
    """Sweep until the changed fraction drops below tol or max_iters is hit."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    lab = np.ascontiguousarray(mask, dtype=np.uint8).copy()
    iters = 0
    for _ in range(params.max_iters):
        changed = _sweep(img, lab, params.mu, params.nu, params.lambda1, params.lambda2, FLIP_EPS)
        iters += 1
        if changed == 0 or changed / lab.size < params.tol:
            break
    return lab.astype(bool), iters


def shift_mask(mask: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Integer translation with zero fill."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    xs0, xs1 = max(0, -dx), min(w, w - dx)
    ys0, ys1 = max(0, -dy), min(h, h - dy)
    if xs0 < xs1 and ys0 < ys1:
        out[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx] = mask[ys0:ys1, xs0:xs1]
    return out


def centroid(mask: np.ndarray) -> Optional[tuple[float, float]]:
    ys, xs = np.nonzero(mask)
    if not len(xs):
        return None
    return (float(xs.mean()) + 0.5, float(ys.mean()) + 0.5)


def working_window(box: BoundingBox, band: int, frame_dims) -> tuple[int, int, int, int]:
    """(x0, y0, x1, y1) of the box grown by ``band`` px, clipped to the frame."""
    width, height = frame_dims
    x0 = max(0, int(math.floor(box.x - band)))
    y0 = max(0, int(math.floor(box.y - band)))
    x1 = min(width, int(math.ceil(box.x + box.w + band)))
    y1 = min(height, int(math.ceil(box.y + box.h + band)))
    return (x0, y0, x1, y1)


def segment_frame(img: np.ndarray, tracked_box: BoundingBox, params: CvParams = CvParams(),
                  prev_mask: Optional[np.ndarray] = None) -> SegResult:
    """Segment around the tracked box, warm-started from the previous mask.

    Without ``prev_mask`` the seed is the ellipse inscribed in ``tracked_box``;
    otherwise the previous mask is shifted so its centroid lands on the
    tracked centre.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    cx, cy = tracked_box.center
    if not (0 <= cx <= w and 0 <= cy <= h):
        raise ValueError(f"tracked centre ({cx:.1f}, {cy:.1f}) is outside the frame")
    seed = None
    if prev_mask is not None:
        c = centroid(prev_mask)
        if c is not None:
            seed = shift_mask(np.asarray(prev_mask, bool), int(round(cx - c[0])), int(round(cy - c[1])))
    if seed is None:
        seed = init_mask(tracked_box, (w, h))
    x0, y0, x1, y1 = working_window(tracked_box, params.band, (w, h))
    sub, iters = minimize(img[y0:y1, x0:x1], seed[y0:y1, x0:x1], params)
    degenerate = not sub.any() or sub.all()
    mask = np.zeros((h, w), dtype=bool)
    if degenerate:
        mask[y0:y1, x0:x1] = seed[y0:y1, x0:x1]
    else:
        mask[y0:y1, x0:x1] = sub
    t = energy_terms(img, mask, params)
    return SegResult(mask, t.energy, iters, t.c1, t.c2, degenerate or t.degenerate, (x0, y0, x1, y1))
