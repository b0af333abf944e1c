"""Flat namespaced run configuration (``pre.gamma``, ``det.nn_threshold``, ...)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any, Mapping, Optional

from .detector import DetectorParams
from .learning import LearnParams
from .medianflow import TrackerParams
from .phantom import Blob, PhantomConfig, default_distractor
from .pipeline import PipelineConfig
from .preprocess import PreprocessConfig
from .segmentation import CvParams


class ConfigError(ValueError):
    pass


_SECTIONS = {
    "pre": PreprocessConfig,
    "mf": TrackerParams,
    "det": DetectorParams,
    "learn": LearnParams,
    "cv": CvParams,
}

_TRACK_KEYS = ("reinit_margin", "tracker_weight", "scale_min", "scale_max", "max_invalid")

_PHANTOM_SCALARS = ("width", "height", "n_frames", "fps", "spacing", "amplitude", "period",
                    "pattern", "noise_sigma", "background", "field_amplitude", "air", "seed")


def _defaults() -> dict:
    out: dict[str, Any] = {"seed": None}
    for ns, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            out[f"{ns}.{f.name}"] = getattr(cls(), f.name)
    pc = PipelineConfig()
    for k in _TRACK_KEYS:
        out[f"track.{k}"] = getattr(pc, k)
    out["nriqa.enabled"] = True
    ph = PhantomConfig()
    for k in _PHANTOM_SCALARS:
        out[f"phantom.{k}"] = getattr(ph, k)
    out["phantom.target_ax"] = ph.target.axes[0]
    out["phantom.target_ay"] = ph.target.axes[1]
    out["phantom.contrast"] = ph.target.contrast
    out["phantom.distractor"] = False
    out["phantom.blank_start"] = -1
    out["phantom.blank_stop"] = -1
    return out


DEFAULTS = _defaults()


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if key == "seed":
        return None if value is None else int(value)
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, int):
        f = float(value)
        if f != int(f):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(f)
    if isinstance(default, float):
        return float(value)
    return str(value)


class RunConfig:
    """Resolved key -> value mapping; unknown keys are rejected."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        self.values = dict(DEFAULTS)
        if values:
            self.update(values)

    def update(self, values: Mapping[str, Any]) -> None:
        for key, v in values.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                self.values[key] = _coerce(key, v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        self._validate()

    @classmethod
    def load(cls, path: Optional[str | Path] = None, overrides: Optional[list[str]] = None) -> "RunConfig":
        values: dict = {}
        if path is not None:
            try:
                values = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(values, dict):
                raise ConfigError(f"config {path} must hold a JSON object")
        cfg = cls(values)
        cfg.update(parse_overrides(overrides or []))
        return cfg

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, ns: str) -> dict:
        p = ns + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def _seeded(self, ns: str) -> dict:
        d = self.section(ns)
        if self.values["seed"] is not None and "seed" in d:
            d["seed"] = self.values["seed"]
        return d

    def _validate(self) -> None:
        try:
            self.pipeline()
            self.cv()
            self.phantom()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def preprocess(self) -> PreprocessConfig:
        return PreprocessConfig(**self.section("pre"))

    def cv(self) -> CvParams:
        return CvParams(**self.section("cv"))

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            pre=self.preprocess(),
            tracker=TrackerParams(**self.section("mf")),
            det=DetectorParams(**self._seeded("det")),
            learn=LearnParams(**self._seeded("learn")),
            **self.section("track"),
        )

    def phantom(self) -> PhantomConfig:
        d = self._seeded("phantom")
        target = Blob((d.pop("target_ax"), d.pop("target_ay")), d.pop("contrast"))
        distractor = default_distractor() if d.pop("distractor") else None
        b0, b1 = d.pop("blank_start"), d.pop("blank_stop")
        blank = (b0, b1) if b0 >= 0 and b1 > b0 else None
        return PhantomConfig(target=target, distractor=distractor, blank_frames=blank, **d)

    def to_dict(self) -> dict:
        return dict(sorted(self.values.items()))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def parse_overrides(items: list[str]) -> dict:
    """``key=value`` strings; values are parsed as JSON where possible."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            out[k.strip()] = v
    return out
