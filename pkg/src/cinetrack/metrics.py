"""Evaluation: displacement MAE, correlation, precision/recall curves, Dice, FPS."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DEFAULT_THETA_PX = 20.0
THETA_MAX = 50


class MetricError(ValueError):
    pass


@dataclass
class GroundTruth:
    """Per-frame target centre in px (``None`` where invisible) and optional masks."""

    centers: list
    masks: Optional[list] = None

    def __post_init__(self):
        self.centers = [None if c is None else (float(c[0]), float(c[1])) for c in self.centers]
        if self.masks is not None and len(self.masks) != len(self.centers):
            raise MetricError("ground-truth masks and centres have different lengths")

    def __len__(self):
        return len(self.centers)


def _pairs(traj, gt: GroundTruth):
    if len(traj.results) != len(gt.centers):
        raise MetricError(
            f"trajectory has {len(traj.results)} frames but ground truth has {len(gt.centers)}"
        )
    ref = traj.reference_center
    g0 = next((c for c in gt.centers if c is not None), None)
    return ref, g0


def displacement_pairs(traj, gt: GroundTruth):
    """Predicted and true displacements (mm) on frames where both exist.

    Predictions are relative to the frame-0 box centre; ground truth relative to
    its first visible centre, so a well-placed init box gives matching origins.
    """
    ref, g0 = _pairs(traj, gt)
    sx, sy = traj.spacing
    pred, true = [], []
    for r, c in zip(traj.results, gt.centers):
        if r.valid and c is not None:
            px, py = r.box.center
            pred.append(((px - ref[0]) * sx, (py - ref[1]) * sy))
            true.append(((c[0] - g0[0]) * sx, (c[1] - g0[1]) * sy))
    return np.array(pred, dtype=np.float64).reshape(-1, 2), np.array(true, dtype=np.float64).reshape(-1, 2)


def mae(traj, gt: GroundTruth) -> tuple[float, float]:
    """Mean and population std of per-frame Euclidean displacement error in mm."""
    p, g = displacement_pairs(traj, gt)
    if len(p) == 0:
        raise MetricError("no frame has both a valid prediction and ground truth")
    e = np.hypot(p[:, 0] - g[:, 0], p[:, 1] - g[:, 1])
    return float(e.mean()), float(e.std())


def pearson_cc(traj, gt: GroundTruth) -> Optional[float]:
    """Mean of per-axis Pearson coefficients; zero-variance axes are dropped."""
    p, g = displacement_pairs(traj, gt)
    if len(p) < 2:
        raise MetricError("need at least two overlapping frames for correlation")
    return cc_arrays(p, g)


def cc_arrays(p: np.ndarray, g: np.ndarray) -> Optional[float]:
    coeffs = []
    for ax in range(2):
        a = p[:, ax] - p[:, ax].mean()
        b = g[:, ax] - g[:, ax].mean()
        na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
        if na == 0 or nb == 0:
            continue
        coeffs.append(float(a @ b) / (na * nb))
    if not coeffs:
        return None
    return float(np.mean(coeffs))


def center_errors(traj, gt: GroundTruth):
    """Per GT-visible frame: (prediction valid, centre error px)."""
    if len(traj.results) != len(gt.centers):
        raise MetricError(
            f"trajectory has {len(traj.results)} frames but ground truth has {len(gt.centers)}"
        )
    valid, err = [], []
    for r, c in zip(traj.results, gt.centers):
        if c is None:
            continue
        if r.valid:
            px, py = r.box.center
            valid.append(True)
            err.append(math.hypot(px - c[0], py - c[1]))
        else:
            valid.append(False)
            err.append(math.inf)
    return np.array(valid, dtype=bool), np.array(err, dtype=np.float64)


def _pr_from_errors(valid: np.ndarray, err: np.ndarray, theta: float) -> tuple[float, float]:
    n_gt = valid.size
    if n_gt == 0:
        raise MetricError("no ground-truth frames to evaluate")
    tp = int(np.count_nonzero(valid & (err <= theta)))
    n_pred = int(np.count_nonzero(valid))
    precision = 1.0 if n_pred == 0 else tp / n_pred
    return precision, tp / n_gt


def precision_recall(traj, gt: GroundTruth, theta: float = DEFAULT_THETA_PX) -> tuple[float, float]:
    if theta < 0:
        raise MetricError("theta must be >= 0")
    valid, err = center_errors(traj, gt)
    return _pr_from_errors(valid, err, theta)


@dataclass
class Curves:
    thetas: np.ndarray
    precision: np.ndarray
    recall: np.ndarray


def pr_curves(traj, gt: GroundTruth, theta_max: int = THETA_MAX) -> Curves:
    valid, err = center_errors(traj, gt)
    thetas = np.arange(0, theta_max + 1, dtype=np.float64)
    pr = np.array([_pr_from_errors(valid, err, t) for t in thetas])
    return Curves(thetas, pr[:, 0], pr[:, 1])


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(gt, dtype=bool)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def dice_global(pred_seq: Sequence[np.ndarray], gt_seq: Sequence[np.ndarray]) -> float:
    """Pooled Dice: twice the summed intersections over summed sizes."""
    if len(pred_seq) != len(gt_seq):
        raise MetricError("prediction and ground-truth mask sequences differ in length")
    inter = 0
    total = 0
    for a, b in zip(pred_seq, gt_seq):
        a = np.asarray(a, dtype=bool)
        b = np.asarray(b, dtype=bool)
        if a.shape != b.shape:
            raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
        inter += int(np.count_nonzero(a & b))
        total += int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def fps_stats(latencies: Sequence[float]) -> tuple[float, float]:
    """Mean and std of per-frame FPS. Callers drop the initialisation frame."""
    lat = np.asarray(latencies, dtype=np.float64)
    if lat.size < 2:
        raise MetricError("need at least two latencies")
    if np.any(lat <= 0):
        raise MetricError("latencies must be positive")
    fps = 1.0 / lat
    return float(fps.mean()), float(fps.std())


@dataclass
class EvalReport:
    mae_mm: tuple
    cc: Optional[float]
    precision: float
    recall: float
    theta_px: float
    curves: Curves
    dice_global: Optional[float] = None
    dice_per_frame: list = field(default_factory=list)
    fps_track: Optional[tuple] = None
    fps_seg: Optional[tuple] = None

    def to_json(self) -> dict:
        def pick(t, i):
            return None if t is None else t[i]

        return {
            "mae_mm_mean": self.mae_mm[0],
            "mae_mm_std": self.mae_mm[1],
            "cc": self.cc,
            "precision": self.precision,
            "recall": self.recall,
            "theta_px": self.theta_px,
            "dice_global": self.dice_global,
            "fps_track_mean": pick(self.fps_track, 0),
            "fps_track_std": pick(self.fps_track, 1),
            "fps_seg_mean": pick(self.fps_seg, 0),
            "fps_seg_std": pick(self.fps_seg, 1),
        }


def evaluate(traj, gt: GroundTruth, theta: float = DEFAULT_THETA_PX,
             pred_masks=None, seg_latencies=None) -> EvalReport:
    precision, recall = precision_recall(traj, gt, theta)
    try:
        cc = pearson_cc(traj, gt)
    except MetricError:
        cc = None
    report = EvalReport(
        mae_mm=mae(traj, gt),
        cc=cc,
        precision=precision,
        recall=recall,
        theta_px=float(theta),
        curves=pr_curves(traj, gt),
    )
    if pred_masks is not None and gt.masks is not None:
        if len(pred_masks) != len(gt.masks):
            raise MetricError("predicted and ground-truth mask sequences differ in length")
        # a frame without a predicted mask counts as an empty prediction
        pairs = [(np.zeros(g.shape, bool) if p is None else p, g)
                 for p, g in zip(pred_masks, gt.masks) if g is not None]
        if pairs:
            report.dice_global = dice_global([p for p, _ in pairs], [g for _, g in pairs])
            report.dice_per_frame = [dice(p, g) for p, g in pairs]
    # frames turned away by the quality gate were never processed
    lat = [r.latency for r in traj.results[1:] if getattr(r, "reason", "") != "quality-rejected"]
    if len(lat) >= 2:
        report.fps_track = fps_stats(lat)
    # both latency series drop their first (initialisation) frame
    if seg_latencies is not None and len(seg_latencies) >= 3:
        report.fps_seg = fps_stats(list(seg_latencies)[1:])
    return report
