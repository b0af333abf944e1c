"""P-N learning: seeding and online update of the detector's object model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .detector import (
    DetectorParams,
    ObjectModel,
    ScanGrid,
    ScanResult,
    build_scan_grid,
    fern_codes_frame,
    relative_similarity,
    Integrals,
)
from .imaging import BoundingBox, bilinear, iou_many, patch_grid, sample_patch

TOP_POSITIVES = 10


class LearningError(ValueError):
    pass


@dataclass(frozen=True)
class LearnParams:
    pos_overlap: float = 0.6
    neg_overlap: float = 0.2
    core_valid_sim: float = 0.7
    max_patches: int = 100
    n_warps: int = 20
    warp_scale: float = 0.05
    warp_shift: float = 1.0
    warp_angle_deg: float = 5.0
    init_nn_negatives: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.neg_overlap < self.pos_overlap <= 1:
            raise ValueError("need 0 <= neg_overlap < pos_overlap <= 1")
        if self.max_patches < 10:
            raise ValueError("max_patches must be >= 10")


def warp_patch(img: np.ndarray, box: BoundingBox, side: int, scale: float = 1.0,
               shift=(0.0, 0.0), angle: float = 0.0) -> np.ndarray:
    """Zero-mean patch sampled through a similarity warp about the box centre."""
    gx, gy = patch_grid(box.x, box.y, box.w, box.h, side)
    cx, cy = box.center
    cx -= 0.5
    cy -= 0.5
    c, s = math.cos(angle), math.sin(angle)
    u, v = gx - cx, gy - cy
    xs = cx + scale * (c * u - s * v) + shift[0]
    ys = cy + scale * (s * u + c * v) + shift[1]
    vals = bilinear(img, xs, ys).reshape(-1)
    return vals - vals.mean()


def warped_set(img: np.ndarray, box: BoundingBox, side: int, params: LearnParams,
               rng: np.random.Generator) -> np.ndarray:
    """The unwarped patch followed by ``n_warps`` random similarity warps."""
    out = [sample_patch(img, box, side).values]
    for _ in range(params.n_warps):
        sc = 1.0 + rng.uniform(-params.warp_scale, params.warp_scale)
        sh = rng.uniform(-params.warp_shift, params.warp_shift, size=2)
        ang = math.radians(rng.uniform(-params.warp_angle_deg, params.warp_angle_deg))
        out.append(warp_patch(img, box, side, sc, sh, ang))
    return np.array(out)


def _top_overlaps(box: BoundingBox, grid: ScanGrid, min_iou: float, k: int = TOP_POSITIVES) -> np.ndarray:
    idx = grid.overlapping(box, min_area_ratio=min_iou)
    if not len(idx):
        return idx
    ov = iou_many(box, grid.boxes[idx])
    keep = ov >= min_iou
    idx, ov = idx[keep], ov[keep]
    order = np.lexsort((idx, -ov))[:k]
    return idx[order]


def init_model(img: np.ndarray, init_box: BoundingBox, params: LearnParams = LearnParams(),
               det_params: DetectorParams = DetectorParams(), grid: ScanGrid | None = None,
               integrals: Integrals | None = None) -> tuple[ObjectModel, ScanGrid]:
    """Seed fern counts and patch sets from the first frame."""
    h, w = img.shape
    if not init_box.in_frame(w, h):
        raise LearningError(f"init box {init_box.as_tuple()} is outside the {w}x{h} frame")
    if min(init_box.w, init_box.h) < det_params.min_win:
        raise LearningError(
            f"init box {init_box.w}x{init_box.h} is smaller than min_win={det_params.min_win}"
        )
    if grid is None:
        grid = build_scan_grid((w, h), init_box, det_params)
    if integrals is None:
        integrals = Integrals.of(img)
    r = init_box.rounded()
    variance = float(integrals.variance(np.array(r, dtype=np.float64))[0])
    if not variance > 1e-12:
        raise LearningError("init patch has zero variance (textureless target)")

    model = ObjectModel.empty(det_params, variance, params.max_patches)
    rng = np.random.default_rng([params.seed, 202])
    side = det_params.patch_side

    positives = warped_set(img, init_box, side, params, rng)
    for p in positives:
        model.add_positive(p)
    codes = [model.codes_for(positives)]
    for i in _top_overlaps(init_box, grid, params.pos_overlap):
        codes.append(model.codes_for(warped_set(img, grid.box(i), side, params, rng)))
    model.update_ferns(np.concatenate(codes), positive=True)

    ov = iou_many(init_box, grid.boxes)
    far = np.flatnonzero(ov < params.neg_overlap)
    far = far[integrals.variance(grid.boxes[far]) >= det_params.var_frac * variance]
    if len(far):
        model.update_ferns(fern_codes_frame(img, grid.boxes[far], model.pairs, side), positive=False)
        pick = np.sort(rng.choice(far, size=min(params.init_nn_negatives, len(far)), replace=False))
        for i in pick:
            model.add_negative(sample_patch(img, grid.box(i), side).values)
    return model, grid


def p_expert(img: np.ndarray, trusted_box: BoundingBox, grid: ScanGrid, model: ObjectModel,
             params: LearnParams = LearnParams()) -> int:
    """Positive updates around a trusted box; returns the number of fern updates."""
    idx = _top_overlaps(trusted_box, grid, params.pos_overlap)
    if len(idx):
        model.update_ferns(fern_codes_frame(img, grid.boxes[idx], model.pairs, model.side), positive=True)
    patch = sample_patch(img, trusted_box, model.side).values
    if relative_similarity(patch[None, :], model)[0] < 1.0:
        model.add_positive(patch)
    return len(idx)


def n_expert(img: np.ndarray, trusted_box: BoundingBox, scan_result: ScanResult, grid: ScanGrid,
             model: ObjectModel, params: LearnParams = LearnParams()) -> int:
    """Negative updates from fern-passing candidates far from the trusted box."""
    fp = scan_result.fern_passed
    if not len(fp):
        return 0
    far = iou_many(trusted_box, grid.boxes[fp]) < params.neg_overlap
    if not np.any(far):
        return 0
    model.update_ferns(scan_result.fern_codes[far], positive=False)
    sims = scan_result.fern_sims[far]
    best = int(np.argmax(sims))
    model.add_negative(scan_result.fern_patches[far][best])
    return int(np.count_nonzero(far))
