"""No-reference image quality: robust z-score combination and percentile admission gate."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .imaging import Frame
from .preprocess import smooth_array

GATE_PERCENTILE = 5.0
MIN_GATE_SCORES = 20
FEATURES = ("contrast", "sharpness", "noise")
# higher contrast / sharpness is better, higher noise is worse
SIGNS = {"contrast": 1.0, "sharpness": 1.0, "noise": -1.0}


class QualityError(ValueError):
    pass


@dataclass(frozen=True)
class QualityFeatures:
    contrast: float
    sharpness: float
    noise: float

    def as_array(self) -> np.ndarray:
        return np.array([self.contrast, self.sharpness, self.noise])


def laplacian(px: np.ndarray) -> np.ndarray:
    """3x3 cross Laplacian on interior pixels only."""
    return px[:-2, 1:-1] + px[2:, 1:-1] + px[1:-1, :-2] + px[1:-1, 2:] - 4.0 * px[1:-1, 1:-1]


def quality_features(frame: Frame) -> QualityFeatures:
    px = frame.pixels
    # offsetting by one pixel first makes a constant frame give exactly 0
    contrast = float((px - px.flat[0]).std())
    sharpness = float(laplacian(px).var())
    r = px - smooth_array(px, 1.0)
    noise = float(np.median(np.abs(r - np.median(r))))
    return QualityFeatures(contrast, sharpness, noise)


def mad(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.median(np.abs(v - np.median(v))))


@dataclass(frozen=True)
class CorpusStats:
    """Per-feature median and MAD over a fitting corpus."""

    median: dict = field(default_factory=dict)
    mad: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, features: Sequence[QualityFeatures]) -> "CorpusStats":
        if not features:
            raise QualityError("cannot fit corpus statistics on zero frames")
        arr = np.array([f.as_array() for f in features])
        med = {k: float(np.median(arr[:, i])) for i, k in enumerate(FEATURES)}
        dev = {k: mad(arr[:, i]) for i, k in enumerate(FEATURES)}
        return cls(med, dev)

    @property
    def fitted(self) -> bool:
        return bool(self.median)


def nriqa_score(f: QualityFeatures, stats: CorpusStats | None) -> float:
    """Sum of signed robust z-scores; a feature with zero MAD is dropped."""
    if stats is None or not stats.fitted:
        raise QualityError("corpus statistics are not fitted")
    score = 0.0
    for k in FEATURES:
        d = stats.mad[k]
        if d > 0:
            score += SIGNS[k] * (getattr(f, k) - stats.median[k]) / d
    return score


@dataclass(frozen=True)
class QualityGate:
    threshold: float | None = None
    percentile: float = GATE_PERCENTILE

    @property
    def fitted(self) -> bool:
        return self.threshold is not None and np.isfinite(self.threshold)


def fit_gate(scores) -> QualityGate:
    s = np.asarray(list(scores), dtype=np.float64)
    if s.size < MIN_GATE_SCORES:
        raise QualityError(f"need at least {MIN_GATE_SCORES} scores to fit the gate, got {s.size}")
    return QualityGate(float(np.percentile(s, GATE_PERCENTILE)))


def admit(score: float, gate: QualityGate) -> bool:
    if not gate.fitted:
        raise QualityError("quality gate is not fitted")
    return bool(score >= gate.threshold)


@dataclass
class QualityReport:
    features: list
    scores: list
    gate: QualityGate
    admitted: list


def assess(frames: Sequence[Frame]) -> QualityReport:
    """Fit corpus stats and gate over ``frames`` and score every frame."""
    feats = [quality_features(f) for f in frames]
    stats = CorpusStats.fit(feats)
    scores = [nriqa_score(f, stats) for f in feats]
    if len(scores) >= MIN_GATE_SCORES:
        gate = fit_gate(scores)
    else:
        # short sequences cannot support a 5th percentile; admit everything
        gate = QualityGate(float(min(scores)))
    return QualityReport(feats, scores, gate, [admit(s, gate) for s in scores])
