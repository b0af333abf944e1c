"""Per-frame tracker/detector integration with online learning."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence as Seq

import numpy as np

from .detector import (
    DetectorParams,
    Integrals,
    ScanResult,
    SearchRegion,
    relative_similarity,
    sample_patches,
    scan,
    update_search_region,
)
from .imaging import BoundingBox, Frame, Sequence, iou
from .learning import LearnParams, init_model, n_expert, p_expert
from .medianflow import Pyramid, TrackerParams, track_box
from .preprocess import PreprocessConfig, preprocess

REASONS = ("init", "tracked", "reinit", "reacquired", "lost", "quality-rejected")


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    pre: PreprocessConfig = field(default_factory=PreprocessConfig)
    tracker: TrackerParams = field(default_factory=TrackerParams)
    det: DetectorParams = field(default_factory=DetectorParams)
    learn: LearnParams = field(default_factory=LearnParams)
    reinit_margin: float = 0.05
    tracker_weight: float = 10.0
    scale_min: float = 0.8
    scale_max: float = 1.25
    max_invalid: int = 10


@dataclass
class TrackResult:
    frame_index: int
    box: Optional[BoundingBox]
    center_mm: Optional[tuple]
    confidence: float
    valid: bool
    latency: float
    reason: str = ""

    def __post_init__(self):
        if self.valid and self.box is None:
            raise PipelineError("a valid result needs a box")
        if not self.valid:
            self.box = None
            self.center_mm = None


@dataclass
class Trajectory:
    results: list
    spacing: tuple
    reference_center: tuple

    @property
    def N(self) -> int:
        return len(self.results)

    def __len__(self) -> int:
        return len(self.results)


class PipelineState:
    """Mutable online state; one instance per sequence."""

    def __init__(self, first: Frame, init_box: BoundingBox, config: PipelineConfig = PipelineConfig()):
        self.config = config
        img = first.pixels
        self.shape = img.shape
        self.frame_dims = (img.shape[1], img.shape[0])
        self.spacing = first.spacing
        self.model, self.grid = init_model(img, init_box, config.learn, config.det,
                                           integrals=Integrals.of(img))
        self.reference_center = init_box.center
        self.prev_pyr = Pyramid.of(img, config.tracker.pyramid_levels)
        self.prev_box: Optional[BoundingBox] = init_box
        self.recent: list = [init_box.center]
        self.region = update_search_region(self.recent, config.det, self.frame_dims)
        self.invalid_run = 0
        self.last_scan: Optional[ScanResult] = None

    def center_mm(self, box: BoundingBox) -> tuple:
        cx, cy = box.center
        return ((cx - self.reference_center[0]) * self.spacing[0],
                (cy - self.reference_center[1]) * self.spacing[1])

    def _similarity(self, img: np.ndarray, box: BoundingBox) -> float:
        patch = sample_patches(img, np.array([box.as_tuple()]), self.model.side)
        return float(relative_similarity(patch, self.model)[0])

    def _tracker(self, pyr: Pyramid, img: np.ndarray):
        if self.prev_box is None:
            return None
        motion, _ = track_box(self.prev_pyr, pyr, self.prev_box, self.config.tracker)
        if motion.failed:
            return None
        s = min(max(motion.scale, self.config.scale_min), self.config.scale_max)
        box = self.prev_box.scaled(s).translated(motion.dx, motion.dy)
        if not box.in_frame(*self.frame_dims):
            return None
        conf = self._similarity(img, box)
        if conf < self.config.det.nn_threshold:
            return None
        return box, conf

    def _integrate(self, img, tracked, detections):
        cfg = self.config
        if tracked is not None:
            tbox, tconf = tracked
            better = [d for d in detections
                      if d[1] > tconf + cfg.reinit_margin and iou(tbox, d[0]) < 0.5]
            if better:
                box, conf = max(better, key=lambda d: d[1])
                return box, conf, "reinit"
            # a nearby detection refines the tracker only if it matches the model better
            close = [d[0] for d in detections if iou(tbox, d[0]) >= 0.5 and d[1] > tconf]
            if close:
                arr = np.array([b.as_tuple() for b in close])
                mean = (cfg.tracker_weight * np.array(tbox.as_tuple()) + arr.sum(axis=0)) / (
                    cfg.tracker_weight + len(close))
                tbox = BoundingBox(*mean)
                tconf = self._similarity(img, tbox)
            return tbox, tconf, "tracked"
        if len(detections) == 1:
            box, conf = detections[0]
            return box, conf, "reacquired"
        return None, 0.0, "lost"

    def step(self, frame: Frame, admitted: bool = True) -> TrackResult:
        """Process one preprocessed frame (latency is filled in by the caller)."""
        if frame.shape != self.shape:
            raise PipelineError(f"frame {frame.index} has shape {frame.shape}, expected {self.shape}")
        if not admitted:
            return TrackResult(frame.index, None, None, 0.0, False, 0.0, "quality-rejected")
        cfg = self.config
        img = frame.pixels
        pyr = Pyramid.of(img, cfg.tracker.pyramid_levels)
        tracked = self._tracker(pyr, img)
        res = scan(img, Integrals.of(img), self.grid, self.model, self.region, cfg.det)
        self.last_scan = res
        box, conf, reason = self._integrate(img, tracked, res.detections)
        valid = box is not None and box.in_frame(*self.frame_dims)
        if not valid:
            box, reason = None, "lost"
        if valid and reason == "tracked" and conf >= cfg.learn.core_valid_sim:
            p_expert(img, box, self.grid, self.model, cfg.learn)
            n_expert(img, box, res, self.grid, self.model, cfg.learn)
        self.prev_pyr = pyr
        self.prev_box = box
        if valid:
            self.invalid_run = 0
            self.recent = (self.recent + [box.center])[-cfg.det.region_history:]
            self.region = update_search_region(self.recent, cfg.det, self.frame_dims)
        else:
            self.invalid_run += 1
            if self.invalid_run >= cfg.max_invalid:
                self.region = replace(self.region, active=False)
        return TrackResult(frame.index, box, self.center_mm(box) if valid else None,
                           conf if valid else 0.0, valid, 0.0, reason)


def run(sequence: Sequence, init_box: BoundingBox, config: PipelineConfig = PipelineConfig(),
        admitted: Optional[Seq[bool]] = None, on_result=None) -> Trajectory:
    """Track through a raw sequence; preprocessing is inside the per-frame timing.

    ``on_result(result, preprocessed_frame)`` is invoked after every frame.
    """
    if admitted is not None and len(admitted) != len(sequence):
        raise PipelineError("admission flags and sequence differ in length")
    results = []
    t0 = time.perf_counter()
    first = preprocess(sequence[0], config.pre)
    state = PipelineState(first, init_box, config)
    r0 = TrackResult(0, init_box, (0.0, 0.0), 1.0, True, time.perf_counter() - t0, "init")
    results.append(r0)
    if on_result is not None:
        on_result(r0, first)
    for k in range(1, len(sequence)):
        t0 = time.perf_counter()
        ok = True if admitted is None else bool(admitted[k])
        frame = preprocess(sequence[k], config.pre) if ok else sequence[k]
        r = state.step(frame, ok)
        r.latency = max(time.perf_counter() - t0, 1e-9)
        results.append(r)
        if on_result is not None:
            on_result(r, frame)
    return Trajectory(results, sequence.spacing, state.reference_center)


# ---------------------------------------------------------------------- csv

TRAJECTORY_COLUMNS = ("frame", "valid", "x_px", "y_px", "w_px", "h_px", "dx_mm", "dy_mm",
                      "confidence", "latency_ms")


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def write_trajectory_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for r in traj.results:
            if r.valid:
                b = r.box
                w.writerow([r.frame_index, 1, _fmt(b.x), _fmt(b.y), _fmt(b.w), _fmt(b.h),
                            _fmt(r.center_mm[0]), _fmt(r.center_mm[1]), _fmt(r.confidence),
                            _fmt(r.latency * 1000.0)])
            else:
                w.writerow([r.frame_index, 0, "", "", "", "", "", "", _fmt(r.confidence),
                            _fmt(r.latency * 1000.0)])


def read_trajectory_csv(path, spacing) -> Trajectory:
    """Load a trajectory; the reference centre is the frame-0 box centre."""
    results = []
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or list(rows[0].keys()) != list(TRAJECTORY_COLUMNS):
        raise PipelineError(f"{path}: not a trajectory file")
    for k, row in enumerate(rows):
        if int(row["frame"]) != k:
            raise PipelineError(f"{path}: frame indices are not contiguous at row {k}")
        lat = float(row["latency_ms"]) / 1000.0
        if row["valid"] == "1":
            box = BoundingBox(*(float(row[c]) for c in ("x_px", "y_px", "w_px", "h_px")))
            results.append(TrackResult(k, box, (float(row["dx_mm"]), float(row["dy_mm"])),
                                       float(row["confidence"]), True, lat))
        else:
            results.append(TrackResult(k, None, None, float(row["confidence"]), False, lat))
    if not results[0].valid:
        raise PipelineError(f"{path}: frame 0 must be valid")
    return Trajectory(results, tuple(spacing), results[0].box.center)
