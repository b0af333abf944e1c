"""Median-flow tracker on top of an iterative pyramidal Lucas-Kanade solver.

Points are handled in index coordinates (pixel centres at integers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit
from scipy.ndimage import correlate1d

from .imaging import BoundingBox, Frame

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
MIN_EIG_PER_AREA = 1e-4
MIN_POINTS = 4


@dataclass(frozen=True)
class TrackerParams:
    pyramid_levels: int = 3
    lk_window: int = 31
    lk_iterations: int = 30
    lk_epsilon: float = 0.01
    grid: int = 10
    fb_max: float = 10.0

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.lk_window < 3 or self.lk_window % 2 == 0:
            raise ValueError("lk_window must be odd and >= 3")
        if self.grid < 2:
            raise ValueError("grid must be >= 2")
        if self.lk_iterations < 1:
            raise ValueError("lk_iterations must be >= 1")


# parameters of the unmodified framework, used as the comparison baseline
BASELINE_TRACKER = TrackerParams(pyramid_levels=5, lk_window=9, lk_iterations=20)


@dataclass(frozen=True)
class PointMatch:
    src: tuple[float, float]
    dst: tuple[float, float]
    fb_error: float
    ncc: float
    valid: bool


class Pyramid:
    """Image pyramid with per-level central-difference gradients."""

    def __init__(self, img: np.ndarray, levels: int):
        self.levels = []
        cur = np.ascontiguousarray(img, dtype=np.float64)
        for lv in range(levels):
            if lv > 0:
                sm = correlate1d(cur, _BINOMIAL5, axis=0, mode="nearest")
                sm = correlate1d(sm, _BINOMIAL5, axis=1, mode="nearest")
                cur = np.ascontiguousarray(sm[::2, ::2])
            self.levels.append((cur, *_gradients(cur)))

    @classmethod
    def of(cls, frame, levels: int) -> "Pyramid":
        img = frame.pixels if isinstance(frame, Frame) else frame
        return cls(img, levels)

    @property
    def shape(self):
        return self.levels[0][0].shape

    def __len__(self):
        return len(self.levels)


def _gradients(img: np.ndarray):
    p = np.pad(img, 1, mode="edge")
    ix = np.ascontiguousarray((p[1:-1, 2:] - p[1:-1, :-2]) * 0.5)
    iy = np.ascontiguousarray((p[2:, 1:-1] - p[:-2, 1:-1]) * 0.5)
    return ix, iy


@njit(cache=True, inline="always")
def _bil(img, x, y):
    h, w = img.shape
    if x < 0.0:
        x = 0.0
    elif x > w - 1.0:
        x = w - 1.0
    if y < 0.0:
        y = 0.0
    elif y > h - 1.0:
        y = h - 1.0
    x0 = int(x)
    y0 = int(y)
    if x0 > w - 2:
        x0 = w - 2 if w > 1 else 0
    if y0 > h - 2:
        y0 = h - 2 if h > 1 else 0
    ax = x - x0
    ay = y - y0
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    top = img[y0, x0] * (1.0 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1.0 - ax) + img[y1, x1] * ax
    return top * (1.0 - ay) + bot * ay


@njit(cache=True)
def _lk_level(I, Ix, Iy, J, pts, flow, status, half, iters, eps, min_eig):
    n = pts.shape[0]
    h, w = I.shape
    side = 2 * half + 1
    area = side * side
    ti = np.empty(area)
    tx = np.empty(area)
    ty = np.empty(area)
    for k in range(n):
        if not status[k]:
            continue
        px = pts[k, 0]
        py = pts[k, 1]
        a = 0.0
        b = 0.0
        c = 0.0
        m = 0
        for v in range(-half, half + 1):
            for u in range(-half, half + 1):
                qx = px + u
                qy = py + v
                if qx < 0.0 or qy < 0.0 or qx > w - 1.0 or qy > h - 1.0:
                    # outside the template image: excluded from the normal equations
                    gx = 0.0
                    gy = 0.0
                else:
                    gx = _bil(Ix, qx, qy)
                    gy = _bil(Iy, qx, qy)
                ti[m] = _bil(I, qx, qy)
                tx[m] = gx
                ty[m] = gy
                m += 1
        # project the gradients off span{1, template}: the solve then ignores
        # a per-window brightness gain and offset between the two frames
        mx = tx.mean()
        my = ty.mean()
        mt = ti.mean()
        tt = 0.0
        gxt = 0.0
        gyt = 0.0
        for m in range(area):
            tx[m] -= mx
            ty[m] -= my
            tc = ti[m] - mt
            tt += tc * tc
            gxt += tx[m] * tc
            gyt += ty[m] * tc
        if tt > 0.0:
            for m in range(area):
                tc = ti[m] - mt
                tx[m] -= gxt / tt * tc
                ty[m] -= gyt / tt * tc
        for m in range(area):
            a += tx[m] * tx[m]
            b += tx[m] * ty[m]
            c += ty[m] * ty[m]
        det = a * c - b * b
        lam = 0.5 * (a + c) - math.sqrt(0.25 * (a - c) * (a - c) + b * b)
        if lam < min_eig * area or det <= 0.0:
            status[k] = False
            continue
        dx = flow[k, 0]
        dy = flow[k, 1]
        for _ in range(iters):
            bx = 0.0
            by = 0.0
            m = 0
            for v in range(-half, half + 1):
                for u in range(-half, half + 1):
                    it = _bil(J, px + u + dx, py + v + dy) - ti[m]
                    bx += it * tx[m]
                    by += it * ty[m]
                    m += 1
            ddx = -(c * bx - b * by) / det
            ddy = -(a * by - b * bx) / det
            dx += ddx
            dy += ddy
            if ddx * ddx + ddy * ddy < eps * eps:
                break
        flow[k, 0] = dx
        flow[k, 1] = dy


def lk_track(prev, nxt, points: np.ndarray, params: TrackerParams = TrackerParams(),
             prev_pyr: Optional[Pyramid] = None, next_pyr: Optional[Pyramid] = None):
    """Coarse-to-fine LK. Returns ``(dst, valid)`` for index-space ``points``."""
    if prev_pyr is None:
        prev_pyr = Pyramid.of(prev, params.pyramid_levels)
    if next_pyr is None:
        next_pyr = Pyramid.of(nxt, params.pyramid_levels)
    if prev_pyr.shape != next_pyr.shape:
        raise ValueError(f"frame sizes differ: {prev_pyr.shape} vs {next_pyr.shape}")
    levels = min(params.pyramid_levels, len(prev_pyr), len(next_pyr))
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    status = np.ones(len(pts), dtype=np.bool_)
    flow = np.zeros_like(pts)
    half = params.lk_window // 2
    for lv in range(levels - 1, -1, -1):
        scale = 2.0 ** lv
        I, Ix, Iy = prev_pyr.levels[lv]
        J = next_pyr.levels[lv][0]
        _lk_level(I, Ix, Iy, J, pts / scale, flow, status, half,
                  params.lk_iterations, params.lk_epsilon, MIN_EIG_PER_AREA)
        if lv > 0:
            flow *= 2.0
    dst = pts + flow
    h, w = prev_pyr.shape
    inside = (dst[:, 0] >= 0) & (dst[:, 0] <= w - 1) & (dst[:, 1] >= 0) & (dst[:, 1] <= h - 1)
    return dst, status & inside


@njit(cache=True)
def _ncc_points(I, J, src, dst, half):
    n = src.shape[0]
    out = np.zeros(n)
    side = 2 * half + 1
    area = side * side
    a = np.empty(area)
    b = np.empty(area)
    for k in range(n):
        m = 0
        sa = 0.0
        sb = 0.0
        for v in range(-half, half + 1):
            for u in range(-half, half + 1):
                a[m] = _bil(I, src[k, 0] + u, src[k, 1] + v)
                b[m] = _bil(J, dst[k, 0] + u, dst[k, 1] + v)
                sa += a[m]
                sb += b[m]
                m += 1
        ma = sa / area
        mb = sb / area
        num = 0.0
        da = 0.0
        db = 0.0
        for m in range(area):
            xa = a[m] - ma
            xb = b[m] - mb
            num += xa * xb
            da += xa * xa
            db += xb * xb
        if da > 0.0 and db > 0.0:
            out[k] = num / math.sqrt(da * db)
        elif da == 0.0 and db == 0.0:
            out[k] = 1.0
    return out


@dataclass
class Matches:
    """Vectorised forward/backward point matches."""

    src: np.ndarray
    dst: np.ndarray
    fb_error: np.ndarray
    ncc: np.ndarray
    valid: np.ndarray
    retained: np.ndarray

    def to_list(self, retained_only: bool = True) -> list[PointMatch]:
        idx = np.flatnonzero(self.retained if retained_only else np.ones(len(self.src), bool))
        return [
            PointMatch(tuple(self.src[i]), tuple(self.dst[i]), float(self.fb_error[i]),
                       float(self.ncc[i]), bool(self.valid[i]))
            for i in idx
        ]

    @property
    def n_retained(self) -> int:
        return int(np.count_nonzero(self.retained))


def fb_ncc_filter(prev_pyr: Pyramid, next_pyr: Pyramid, src: np.ndarray, dst: np.ndarray,
                  valid: np.ndarray, params: TrackerParams = TrackerParams()) -> Matches:
    """Backward-track, score, and keep points at or better than the median FB error and NCC."""
    src = np.ascontiguousarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.ascontiguousarray(dst, dtype=np.float64).reshape(-1, 2)
    back, bvalid = lk_track(None, None, dst, params, prev_pyr=next_pyr, next_pyr=prev_pyr)
    ok = np.asarray(valid, dtype=bool) & bvalid
    fb = np.hypot(*(src - back).T)
    ncc = _ncc_points(prev_pyr.levels[0][0], next_pyr.levels[0][0], src, dst, params.lk_window // 2)
    retained = np.zeros(len(src), dtype=bool)
    if np.any(ok):
        med_fb = np.median(fb[ok])
        med_ncc = np.median(ncc[ok])
        retained = ok & (fb <= med_fb) & (ncc >= med_ncc) & (fb <= params.fb_max)
    return Matches(src, dst, fb, ncc, ok, retained)


def grid_points(box: BoundingBox, n: int) -> np.ndarray:
    """n x n lattice at cell centres of the box, in index coordinates."""
    t = (np.arange(n) + 0.5) / n
    xs = box.x + t * box.w - 0.5
    ys = box.y + t * box.h - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass(frozen=True)
class BoxMotion:
    dx: float
    dy: float
    scale: float
    reliability: float
    failed: bool
    box: Optional[BoundingBox]


def pairwise_scale(src: np.ndarray, dst: np.ndarray) -> float:
    n = len(src)
    if n < 2:
        return 1.0
    i, j = np.triu_indices(n, 1)
    d0 = np.hypot(*(src[i] - src[j]).T)
    d1 = np.hypot(*(dst[i] - dst[j]).T)
    ok = d0 > 0
    if not np.any(ok):
        return 1.0
    return float(np.median(d1[ok] / d0[ok]))


def estimate_box_motion(box: BoundingBox, src: np.ndarray, dst: np.ndarray,
                        n_seeded: int) -> BoxMotion:
    """Median displacement and pairwise-distance scale from retained matches."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    reliability = n / n_seeded if n_seeded else 0.0
    if n < MIN_POINTS:
        return BoxMotion(0.0, 0.0, 1.0, reliability, True, None)
    d = dst - src
    dx = float(np.median(d[:, 0]))
    dy = float(np.median(d[:, 1]))
    s = pairwise_scale(src, dst)
    return BoxMotion(dx, dy, s, reliability, False, box.scaled(s).translated(dx, dy))


def track_box(prev_pyr: Pyramid, next_pyr: Pyramid, box: BoundingBox,
              params: TrackerParams = TrackerParams()) -> tuple[BoxMotion, Matches]:
    pts = grid_points(box, params.grid)
    dst, valid = lk_track(None, None, pts, params, prev_pyr=prev_pyr, next_pyr=next_pyr)
    m = fb_ncc_filter(prev_pyr, next_pyr, pts, dst, valid, params)
    motion = estimate_box_motion(box, m.src[m.retained], m.dst[m.retained], len(pts))
    return motion, m
