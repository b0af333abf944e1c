"""Scanning-window detector: variance filter, fern ensemble, nearest-neighbour stage.

The scan can be restricted to a small square search region anchored at the
recent target centroid; an inactive region means a full-frame scan.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .imaging import BoundingBox, ImagingError, NormalizedPatch, iou, iou_many, round_half_up
from .medianflow import _bil

CLUSTER_IOU = 0.5


class DetectorError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorParams:
    min_win: int = 12
    scale_step: float = 1.1
    shift_frac: float = 0.1
    var_frac: float = 0.5
    n_ferns: int = 10
    fern_features: int = 13
    fern_threshold: float = 0.5
    nn_threshold: float = 0.6
    region_side: float = 30.0
    region_history: int = 3
    patch_side: int = 12
    regional: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.scale_step > 1:
            raise ValueError("scale_step must be > 1")
        if not 0 < self.var_frac <= 1:
            raise ValueError("var_frac must lie in (0, 1]")
        if not self.region_side > 0:
            raise ValueError("region_side must be > 0")
        if self.region_history < 1:
            raise ValueError("region_history must be >= 1")
        if self.patch_side < 4:
            raise ValueError("patch_side must be >= 4")
        if not 1 <= self.fern_features <= 20:
            raise ValueError("fern_features must lie in [1, 20]")


# ----------------------------------------------------------------- scan grid

@dataclass
class _Scale:
    w: int
    h: int
    xs: np.ndarray
    ys: np.ndarray
    offset: int

    @property
    def count(self) -> int:
        return len(self.xs) * len(self.ys)


@dataclass
class ScanGrid:
    scales: list
    boxes: np.ndarray  # (N, 4) float, rows x, y, w, h
    frame_dims: tuple

    def __len__(self) -> int:
        return len(self.boxes)

    def _select(self, x0, x1, y0, y1, by_center: bool, scales=None) -> np.ndarray:
        out = []
        for s in (self.scales if scales is None else scales):
            if by_center:
                ix = np.flatnonzero((s.xs + s.w / 2.0 >= x0) & (s.xs + s.w / 2.0 < x1))
                iy = np.flatnonzero((s.ys + s.h / 2.0 >= y0) & (s.ys + s.h / 2.0 < y1))
            else:
                ix = np.flatnonzero((s.xs < x1) & (s.xs + s.w > x0))
                iy = np.flatnonzero((s.ys < y1) & (s.ys + s.h > y0))
            if len(ix) and len(iy):
                out.append((s.offset + iy[:, None] * len(s.xs) + ix[None, :]).ravel())
        if not out:
            return np.zeros(0, dtype=np.intp)
        return np.concatenate(out)

    def in_region(self, region: Optional["SearchRegion"]) -> np.ndarray:
        """Indices of boxes whose centre lies inside an active region (else all)."""
        if region is None or not region.active:
            return np.arange(len(self.boxes))
        x0, y0, x1, y1 = region.rect
        return self._select(x0, x1, y0, y1, by_center=True)

    def overlapping(self, box: BoundingBox, min_area_ratio: float = 0.0) -> np.ndarray:
        """Indices of boxes intersecting ``box`` (optionally with similar area)."""
        scales = self.scales
        if min_area_ratio > 0:
            a = box.area
            scales = [s for s in scales
                      if min_area_ratio <= (s.w * s.h) / a <= 1.0 / min_area_ratio]
        return self._select(box.x, box.x + box.w, box.y, box.y + box.h, by_center=False,
                            scales=scales)

    def box(self, i: int) -> BoundingBox:
        return BoundingBox(*self.boxes[i])


def _positions(extent: int, side: int, shift: int) -> np.ndarray:
    return np.arange(0, extent - side + 1, shift, dtype=np.float64)


def build_scan_grid(frame_dims, init_box: BoundingBox, params: DetectorParams = DetectorParams()) -> ScanGrid:
    """All windows over scales ``init * step**k`` with sides in [min_win, frame side]."""
    width, height = frame_dims
    if not init_box.in_frame(width, height):
        raise DetectorError(f"init box {init_box.as_tuple()} is outside the frame")
    if min(init_box.w, init_box.h) < params.min_win:
        raise DetectorError(
            f"init box {init_box.w}x{init_box.h} is smaller than min_win={params.min_win}"
        )
    step = params.scale_step
    k_up = math.floor(math.log(min(width / init_box.w, height / init_box.h)) / math.log(step) + 1e-12)
    k_down = math.floor(math.log(min(init_box.w, init_box.h) / params.min_win) / math.log(step) + 1e-12)
    scales, rows = [], []
    offset = 0
    for k in range(-k_down, k_up + 1):
        s = step ** k
        w = min(round_half_up(init_box.w * s), width)
        h = min(round_half_up(init_box.h * s), height)
        sx = max(1, round_half_up(params.shift_frac * w))
        sy = max(1, round_half_up(params.shift_frac * h))
        xs = _positions(width, w, sx)
        ys = _positions(height, h, sy)
        if not len(xs) or not len(ys):
            continue
        sc = _Scale(w, h, xs, ys, offset)
        gx, gy = np.meshgrid(xs, ys)
        rows.append(np.column_stack([gx.ravel(), gy.ravel(),
                                     np.full(gx.size, w, float), np.full(gx.size, h, float)]))
        scales.append(sc)
        offset += sc.count
    return ScanGrid(scales, np.concatenate(rows), (width, height))


# ---------------------------------------------------------------- integrals

@dataclass
class Integrals:
    ii: np.ndarray
    ii2: np.ndarray

    @classmethod
    def of(cls, img: np.ndarray) -> "Integrals":
        h, w = img.shape
        ii = np.zeros((h + 1, w + 1))
        ii2 = np.zeros((h + 1, w + 1))
        ii[1:, 1:] = img.cumsum(0).cumsum(1)
        ii2[1:, 1:] = (img * img).cumsum(0).cumsum(1)
        return cls(ii, ii2)

    def variance(self, boxes: np.ndarray) -> np.ndarray:
        """Variance of integer boxes (rows x, y, w, h) in O(1) each."""
        b = np.asarray(boxes).reshape(-1, 4).astype(np.intp)
        x0, y0, x1, y1 = b[:, 0], b[:, 1], b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
        n = (b[:, 2] * b[:, 3]).astype(np.float64)
        s = self.ii[y1, x1] - self.ii[y0, x1] - self.ii[y1, x0] + self.ii[y0, x0]
        s2 = self.ii2[y1, x1] - self.ii2[y0, x1] - self.ii2[y1, x0] + self.ii2[y0, x0]
        mean = s / n
        return np.maximum(s2 / n - mean * mean, 0.0)


def variance_pass(integrals: Integrals, box, model: "ObjectModel", params: DetectorParams = DetectorParams()) -> bool:
    b = np.asarray(box.rounded() if isinstance(box, BoundingBox) else box, dtype=np.float64)
    return bool(integrals.variance(b)[0] >= params.var_frac * model.init_variance)


# -------------------------------------------------------------------- ferns

@njit(cache=True)
def _fern_codes_frame(img, boxes, pairs, side):
    n = boxes.shape[0]
    nf = pairs.shape[0]
    nb = pairs.shape[1]
    out = np.zeros((n, nf), dtype=np.int64)
    for i in range(n):
        bx = boxes[i, 0]
        by = boxes[i, 1]
        sx = boxes[i, 2] / side
        sy = boxes[i, 3] / side
        for f in range(nf):
            code = 0
            for j in range(nb):
                v1 = _bil(img, bx + (pairs[f, j, 0] + 0.5) * sx - 0.5, by + (pairs[f, j, 1] + 0.5) * sy - 0.5)
                v2 = _bil(img, bx + (pairs[f, j, 2] + 0.5) * sx - 0.5, by + (pairs[f, j, 3] + 0.5) * sy - 0.5)
                code = code * 2 + (1 if v1 > v2 else 0)
            out[i, f] = code
    return out


def fern_codes_patches(values: np.ndarray, pairs: np.ndarray, side: int) -> np.ndarray:
    """Leaf codes for an (M, side*side) stack of patches."""
    v = np.asarray(values).reshape(-1, side * side)
    a = v[:, pairs[..., 1] * side + pairs[..., 0]]
    b = v[:, pairs[..., 3] * side + pairs[..., 2]]
    bits = (a > b).astype(np.int64)
    weights = 1 << np.arange(pairs.shape[1] - 1, -1, -1, dtype=np.int64)
    return (bits * weights).sum(axis=-1)


@njit(cache=True)
def _sample_patches(img, boxes, side):
    n = boxes.shape[0]
    out = np.empty((n, side * side))
    for i in range(n):
        sx = boxes[i, 2] / side
        sy = boxes[i, 3] / side
        m = 0
        acc = 0.0
        for r in range(side):
            yy = boxes[i, 1] + (r + 0.5) * sy - 0.5
            for c in range(side):
                v = _bil(img, boxes[i, 0] + (c + 0.5) * sx - 0.5, yy)
                out[i, m] = v
                acc += v
                m += 1
        mean = acc / (side * side)
        for m in range(side * side):
            out[i, m] -= mean
    return out


def sample_patches(img: np.ndarray, boxes: np.ndarray, side: int) -> np.ndarray:
    b = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    return _sample_patches(np.ascontiguousarray(img, dtype=np.float64), b, side)


def fern_codes_frame(img: np.ndarray, boxes: np.ndarray, pairs: np.ndarray, side: int) -> np.ndarray:
    b = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    return _fern_codes_frame(np.ascontiguousarray(img, dtype=np.float64), b, pairs, side)


def _unit_rows(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(len(values), -1)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)


# -------------------------------------------------------------- object model

@dataclass
class ObjectModel:
    side: int
    pairs: np.ndarray  # (n_ferns, fern_features, 4): x1, y1, x2, y2 in patch space
    pos_counts: np.ndarray
    neg_counts: np.ndarray
    init_variance: float
    max_patches: int = 100
    pos_patches: list = field(default_factory=list)
    neg_patches: list = field(default_factory=list)
    _pos_unit: Optional[np.ndarray] = field(default=None, repr=False)
    _neg_unit: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def empty(cls, params: DetectorParams, init_variance: float, max_patches: int = 100) -> "ObjectModel":
        rng = np.random.default_rng([params.seed, 101])
        side = params.patch_side
        pairs = np.empty((params.n_ferns, params.fern_features, 4), dtype=np.int64)
        for f in range(params.n_ferns):
            for j in range(params.fern_features):
                while True:
                    p = rng.integers(0, side, size=4)
                    if p[0] != p[2] or p[1] != p[3]:
                        break
                pairs[f, j] = p
        leaves = 1 << params.fern_features
        zeros = np.zeros((params.n_ferns, leaves), dtype=np.int64)
        return cls(side, pairs, zeros, zeros.copy(), float(init_variance), max_patches)

    # ferns
    def codes_for(self, patches: np.ndarray) -> np.ndarray:
        return fern_codes_patches(patches, self.pairs, self.side)

    def update_ferns(self, codes: np.ndarray, positive: bool) -> None:
        codes = np.asarray(codes, dtype=np.int64).reshape(-1, self.pairs.shape[0])
        target = self.pos_counts if positive else self.neg_counts
        for f in range(codes.shape[1]):
            np.add.at(target[f], codes[:, f], 1)

    def posterior(self, codes: np.ndarray) -> np.ndarray:
        """Mean leaf posterior p/(p+n) over ferns for each code row."""
        codes = np.asarray(codes, dtype=np.int64).reshape(-1, self.pairs.shape[0])
        f = np.arange(codes.shape[1])
        p = self.pos_counts[f, codes]
        n = self.neg_counts[f, codes]
        tot = p + n
        post = np.divide(p, tot, out=np.zeros(p.shape), where=tot > 0)
        return post.mean(axis=1)

    # nearest-neighbour patch sets
    def _add(self, store: list, values: np.ndarray) -> None:
        store.append(np.asarray(values, dtype=np.float64).reshape(-1).copy())
        while len(store) > self.max_patches:
            del store[0]
        self._pos_unit = None
        self._neg_unit = None

    def add_positive(self, values) -> None:
        self._add(self.pos_patches, values.values if isinstance(values, NormalizedPatch) else values)

    def add_negative(self, values) -> None:
        self._add(self.neg_patches, values.values if isinstance(values, NormalizedPatch) else values)

    def units(self):
        if self._pos_unit is None:
            self._pos_unit = _unit_rows(np.array(self.pos_patches)) if self.pos_patches else np.zeros((0, self.side ** 2))
            self._neg_unit = _unit_rows(np.array(self.neg_patches)) if self.neg_patches else np.zeros((0, self.side ** 2))
        return self._pos_unit, self._neg_unit

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.pos_counts, self.neg_counts, *self.pos_patches, *self.neg_patches):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr((len(self.pos_patches), len(self.neg_patches), self.init_variance)).encode())
        return h.hexdigest()


def fern_posterior(patch: NormalizedPatch, model: ObjectModel) -> float:
    return float(model.posterior(model.codes_for(patch.values[None, :]))[0])


def relative_similarity(patches: np.ndarray, model: ObjectModel) -> np.ndarray:
    """Relative NN similarity for an (M, side*side) stack of zero-mean patches.

    With s = (NCC + 1) / 2, S+ / S- the best similarity to the positive /
    negative sets: ``(1 - S-) / ((1 - S-) + (1 - S+))``; no negatives gives
    1 whenever S+ > 0.
    """
    pos, neg = model.units()
    if len(pos) == 0:
        raise DetectorError("object model has no positive patches")
    q = _unit_rows(np.asarray(patches).reshape(-1, model.side ** 2))
    s_pos = (np.clip(q @ pos.T, -1, 1).max(axis=1) + 1.0) / 2.0
    if len(neg) == 0:
        return np.where(s_pos > 0, 1.0, 0.0)
    s_neg = (np.clip(q @ neg.T, -1, 1).max(axis=1) + 1.0) / 2.0
    d_pos = 1.0 - s_pos
    d_neg = 1.0 - s_neg
    tot = d_pos + d_neg
    return np.divide(d_neg, tot, out=np.full(len(q), 0.5), where=tot > 0)


def nn_similarity(patch: NormalizedPatch, model: ObjectModel) -> float:
    return float(relative_similarity(patch.values[None, :], model)[0])


# ----------------------------------------------------------- search region

@dataclass(frozen=True)
class SearchRegion:
    center: tuple[float, float] = (0.0, 0.0)
    side: float = 30.0
    active: bool = False
    frame_dims: tuple[int, int] = (0, 0)

    @property
    def rect(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) clamped inside the frame."""
        w, h = self.frame_dims
        half = self.side / 2.0
        x0 = min(max(self.center[0] - half, 0.0), max(w - self.side, 0.0))
        y0 = min(max(self.center[1] - half, 0.0), max(h - self.side, 0.0))
        return (x0, y0, x0 + self.side, y0 + self.side)


def update_search_region(recent_centers: Sequence, params: DetectorParams = DetectorParams(),
                         frame_dims=(10 ** 9, 10 ** 9)) -> SearchRegion:
    pts = [c for c in recent_centers if c is not None][-params.region_history:]
    if not pts or not params.regional:
        return SearchRegion(side=params.region_side, active=False, frame_dims=tuple(frame_dims))
    cx = sum(p[0] for p in pts) / len(pts)
    cy = sum(p[1] for p in pts) / len(pts)
    return SearchRegion((cx, cy), params.region_side, True, tuple(frame_dims))


# ------------------------------------------------------------------- detect

@dataclass
class ScanResult:
    candidates: np.ndarray        # grid indices examined
    var_passed: np.ndarray        # grid indices passing the variance filter
    fern_passed: np.ndarray       # grid indices passing ferns
    codes: np.ndarray             # fern codes of var_passed (row-aligned)
    posteriors: np.ndarray        # posteriors of var_passed
    fern_sims: np.ndarray         # NN similarity of fern_passed
    fern_patches: np.ndarray      # normalized patches of fern_passed
    detections: list              # [(BoundingBox, similarity)]

    @property
    def fern_codes(self) -> np.ndarray:
        keep = np.isin(self.var_passed, self.fern_passed)
        return self.codes[keep]


def cluster(boxes: np.ndarray, sims: np.ndarray, min_iou: float = CLUSTER_IOU) -> list:
    """Greedy IoU clustering; each cluster gives its mean box and max similarity."""
    order = np.argsort(-np.asarray(sims), kind="stable")
    seeds, members = [], []
    for i in order:
        b = BoundingBox(*boxes[i])
        for s_idx, seed in enumerate(seeds):
            if iou(seed, b) >= min_iou:
                members[s_idx].append(i)
                break
        else:
            seeds.append(b)
            members.append([i])
    out = []
    for m in members:
        mb = boxes[m].mean(axis=0)
        out.append((BoundingBox(*mb), float(np.max(sims[m]))))
    return out


def scan(img: np.ndarray, integrals: Integrals, grid: ScanGrid, model: ObjectModel,
         region: Optional[SearchRegion], params: DetectorParams = DetectorParams()) -> ScanResult:
    cand = grid.in_region(region)
    var = integrals.variance(grid.boxes[cand])
    vp = cand[var >= params.var_frac * model.init_variance]
    codes = fern_codes_frame(img, grid.boxes[vp], model.pairs, model.side)
    post = model.posterior(codes) if len(vp) else np.zeros(0)
    fp = vp[post >= params.fern_threshold]
    if len(fp):
        patches = sample_patches(img, grid.boxes[fp], model.side)
        sims = relative_similarity(patches, model)
    else:
        patches = np.zeros((0, model.side ** 2))
        sims = np.zeros(0)
    keep = sims >= params.nn_threshold
    dets = cluster(grid.boxes[fp[keep]], sims[keep]) if np.any(keep) else []
    return ScanResult(cand, vp, fp, codes, post, sims, patches, dets)


def detect(img: np.ndarray, grid: ScanGrid, model: ObjectModel, region: Optional[SearchRegion],
           params: DetectorParams = DetectorParams(), integrals: Optional[Integrals] = None) -> list:
    """Cascade + clustering; returns ``[(box, relative_similarity)]``."""
    if integrals is None:
        integrals = Integrals.of(img)
    return scan(img, integrals, grid, model, region, params).detections
