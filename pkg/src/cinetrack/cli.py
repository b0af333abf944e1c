"""Command-line entry point: phantom, score, track, segment, eval, sweep."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, parse_overrides
from .detector import DetectorError
from .imaging import (
    BoundingBox,
    ImagingError,
    box_from_string,
    load_sequence,
    read_gray8,
    save_sequence,
    write_gray8,
)
from .learning import LearningError
from .metrics import GroundTruth, MetricError, evaluate, fps_stats
from .phantom import PhantomError, generate
from .pipeline import PipelineError, Trajectory, read_trajectory_csv, run, write_trajectory_csv
from .preprocess import PreprocessConfig, preprocess
from .quality import CorpusStats, assess, nriqa_score, quality_features
from .segmentation import segment_frame

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_GATE = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ helpers

def _f6(v) -> str:
    return "" if v is None else f"{float(v):.6f}"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None), getattr(args, "set", None))
    return cfg


def _out_dir(path) -> Path:
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {d}: {exc}", EXIT_IO)
    return d


def _load(seq_dir):
    try:
        return load_sequence(seq_dir)
    except (ImagingError, OSError) as exc:
        raise CliError(f"cannot load sequence: {exc}", EXIT_IO)


def _init_box(text: str, seq) -> BoundingBox:
    try:
        box = box_from_string(text)
    except ImagingError as exc:
        raise CliError(str(exc), EXIT_USAGE)
    h, w = seq.shape
    if not box.in_frame(w, h):
        raise CliError(f"--init {text} lies outside the {w}x{h} frame", EXIT_USAGE)
    return box


def _quality(seq, cfg: RunConfig, out: Path):
    pre = cfg.preprocess()
    frames = [preprocess(f, pre) for f in seq]
    if not cfg["nriqa.enabled"]:
        return [True] * len(seq)
    rep = assess(frames)
    rows = [[k, _f6(f.contrast), _f6(f.sharpness), _f6(f.noise), _f6(s), int(a)]
            for k, (f, s, a) in enumerate(zip(rep.features, rep.scores, rep.admitted))]
    _write_csv(out / "quality.csv", ("frame", "contrast", "sharpness", "noise", "score", "admitted"), rows)
    return rep.admitted


def _run_report(cfg: RunConfig, extra: Optional[dict] = None) -> dict:
    rep = {"version": __version__, "config": cfg.to_dict(), "config_hash": cfg.hash()}
    rep.update(extra or {})
    return rep


def _track(seq, box, cfg, out: Path, on_result=None) -> Trajectory:
    admitted = _quality(seq, cfg, out)
    if not admitted[0]:
        raise CliError("frame 0 failed the quality gate; choose another start frame", EXIT_GATE)
    try:
        traj = run(seq, box, cfg.pipeline(), admitted, on_result=on_result)
    except (LearningError, DetectorError, PipelineError) as exc:
        raise CliError(f"tracking failed to initialise: {exc}", EXIT_USAGE)
    write_trajectory_csv(traj, out / "trajectory.csv")
    return traj


# ----------------------------------------------------------------- commands

def cmd_phantom(args) -> int:
    cfg = _config(args)
    flags = {
        "phantom.n_frames": args.frames,
        "phantom.fps": args.fps,
        "phantom.pattern": args.pattern,
        "phantom.amplitude": args.amplitude,
        "phantom.noise_sigma": args.noise,
        "phantom.seed": args.seed,
        "phantom.distractor": True if args.distractor else None,
    }
    if args.blank:
        try:
            a, b = (int(t) for t in args.blank.split(":"))
        except ValueError:
            raise CliError(f"--blank expects start:stop, got {args.blank!r}", EXIT_USAGE)
        flags["phantom.blank_start"], flags["phantom.blank_stop"] = a, b
    cfg.update({k: v for k, v in flags.items() if v is not None})
    pc = cfg.phantom()
    try:
        seq, gt = generate(pc)
    except PhantomError as exc:
        raise CliError(str(exc), EXIT_USAGE)
    out = _out_dir(args.out)
    save_sequence(seq, out)
    rows = []
    for k, c in enumerate(gt.centers):
        rows.append([k, _f6(c[0]), _f6(c[1]), 1] if c is not None else [k, "", "", 0])
        write_gray8(out / f"gt_mask_{k:04d}.png", gt.masks[k].astype(np.uint8) * 255)
    _write_csv(out / "gt_centers.csv", ("frame", "cx_px", "cy_px", "visible"), rows)
    box = pc.init_box()
    (out / "init_box.txt").write_text("{:g},{:g},{:g},{:g}\n".format(*box.as_tuple()), encoding="utf-8")
    _write_json(out / "phantom.json", _run_report(cfg, {"init_box": list(box.as_tuple())}))
    print(f"wrote {len(seq)} frames to {out} (init box {box.x:g},{box.y:g},{box.w:g},{box.h:g})")
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _config(args)
    seq = _load(args.seq)
    out = _out_dir(args.out)
    cfg.update({"nriqa.enabled": True})
    admitted = _quality(seq, cfg, out)
    print(f"admitted {sum(admitted)} of {len(admitted)} frames")
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = _config(args)
    seq = _load(args.seq)
    box = _init_box(args.init, seq)
    out = _out_dir(args.out)
    traj = _track(seq, box, cfg, out)
    lat = [r.latency for r in traj.results[1:]]
    extra = {"frames": len(traj), "valid": sum(r.valid for r in traj.results)}
    if len(lat) >= 2:
        extra["fps_track_mean"], extra["fps_track_std"] = fps_stats(lat)
    _write_json(out / "run.json", _run_report(cfg, extra))
    print(f"tracked {extra['valid']}/{len(traj)} frames valid -> {out / 'trajectory.csv'}")
    return EXIT_OK


def _load_gt(gt_dir: Path, n_expected: Optional[int] = None) -> GroundTruth:
    path = gt_dir / "gt_centers.csv"
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise CliError(f"cannot read ground truth: {exc}", EXIT_IO)
    centers, masks = [], []
    have_masks = (gt_dir / "gt_mask_0000.png").is_file()
    for k, row in enumerate(rows):
        try:
            frame = int(row["frame"])
        except (KeyError, ValueError):
            raise CliError(f"{path}: malformed row {k}", EXIT_IO)
        if frame != k:
            raise CliError(f"{path}: ground truth is misaligned (row {k} holds frame {frame})", EXIT_IO)
        centers.append((float(row["cx_px"]), float(row["cy_px"])) if row["visible"] == "1" else None)
        if have_masks:
            try:
                masks.append(read_gray8(gt_dir / f"gt_mask_{k:04d}.png") > 127)
            except (OSError, ImagingError) as exc:
                raise CliError(f"cannot read ground-truth mask {k}: {exc}", EXIT_IO)
    if n_expected is not None and len(centers) != n_expected:
        raise CliError(
            f"ground truth has {len(centers)} frames but the trajectory has {n_expected}", EXIT_IO)
    return GroundTruth(centers, masks if have_masks else None)


def _write_masks(out: Path, masks: dict, seg_rows: list, header) -> None:
    for k, m in masks.items():
        write_gray8(out / f"mask_{k:04d}.png", m.astype(np.uint8) * 255)
    _write_csv(out / "segmentation.csv", header, seg_rows)


def cmd_segment(args) -> int:
    cfg = _config(args)
    seq = _load(args.seq)
    out = _out_dir(args.out)
    cvp = cfg.cv()
    gt = _load_gt(Path(args.gt), len(seq)) if args.gt else None
    masks: dict = {}
    seg_rows, timing = [], []
    state = {"prev": None}

    def segment(result, frame, track_latency):
        if not result.valid:
            timing.append([result.frame_index, _f6(track_latency * 1e3), "", _f6(track_latency * 1e3)])
            return
        t0 = time.perf_counter()
        res = segment_frame(frame.pixels, result.box, cvp, state["prev"])
        dt = time.perf_counter() - t0
        state["prev"] = res.mask
        k = result.frame_index
        masks[k] = res.mask
        row = [k, res.area, _f6(res.c1), _f6(res.c2), _f6(res.energy), res.iters_used]
        if gt is not None and gt.masks is not None:
            from .metrics import dice
            row.append(_f6(dice(res.mask, gt.masks[k])))
        seg_rows.append(row)
        timing.append([k, _f6(track_latency * 1e3), _f6(dt * 1e3), _f6((track_latency + dt) * 1e3)])

    if args.with_track:
        if not args.init:
            raise CliError("--with-track needs --init x,y,w,h", EXIT_USAGE)
        box = _init_box(args.init, seq)
        _track(seq, box, cfg, out, on_result=lambda r, f: segment(r, f, r.latency))
        _write_json(out / "run.json", _run_report(cfg))
    else:
        traj_path = Path(args.trajectory) if args.trajectory else None
        if traj_path is None or not traj_path.is_file():
            raise CliError(f"trajectory file {traj_path} not found (or pass --with-track)", EXIT_IO)
        try:
            traj = read_trajectory_csv(traj_path, seq.spacing)
        except (PipelineError, OSError, ValueError) as exc:
            raise CliError(f"cannot read trajectory: {exc}", EXIT_IO)
        if len(traj) != len(seq):
            raise CliError("trajectory and sequence differ in length", EXIT_IO)
        pre = cfg.preprocess()
        for r in traj.results:
            segment(r, preprocess(seq[r.frame_index], pre) if r.valid else None, r.latency)
    header = ["frame", "area_px", "c1", "c2", "energy", "iters"]
    if gt is not None and gt.masks is not None:
        header.append("dice_vs_gt")
    _write_masks(out, masks, seg_rows, header)
    _write_csv(out / "timing.csv", ("frame", "track_ms", "seg_ms", "total_ms"), timing)
    print(f"segmented {len(masks)} frames -> {out}")
    return EXIT_OK


def _read_timing(path: Path):
    if not path.is_file():
        return None
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["seg_ms"]) / 1e3 for r in rows if r["seg_ms"]]


def cmd_eval(args) -> int:
    gt_dir = Path(args.gt)
    meta = Path(args.meta) if args.meta else gt_dir / "meta.json"
    try:
        md = json.loads(meta.read_text(encoding="utf-8"))
        spacing = (float(md["spacing_mm_x"]), float(md["spacing_mm_y"]))
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot read spacing from {meta}: {exc}", EXIT_IO)
    try:
        traj = read_trajectory_csv(args.trajectory, spacing)
    except (PipelineError, OSError, ValueError) as exc:
        raise CliError(f"cannot read trajectory: {exc}", EXIT_IO)
    gt = _load_gt(gt_dir, len(traj))
    qpath = Path(args.trajectory).parent / "quality.csv"
    if qpath.is_file():
        with open(qpath, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                k = int(row["frame"])
                if row["admitted"] == "0" and k < len(traj):
                    traj.results[k].reason = "quality-rejected"
    theta = args.theta
    if args.theta_mm is not None:
        theta = args.theta_mm / min(spacing)
    pred_masks = seg_lat = None
    if args.masks:
        mdir = Path(args.masks)
        pred_masks = []
        for k in range(len(traj)):
            p = mdir / f"mask_{k:04d}.png"
            pred_masks.append(read_gray8(p) > 127 if p.is_file() else None)
        seg_lat = _read_timing(mdir / "timing.csv")
    try:
        report = evaluate(traj, gt, theta, pred_masks, seg_lat)
    except MetricError as exc:
        raise CliError(f"evaluation failed: {exc}", EXIT_IO)
    out = _out_dir(args.out)
    run_json = Path(args.trajectory).parent / "run.json"
    cfg = None
    if run_json.is_file():
        try:
            cfg = json.loads(run_json.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            cfg = None
    if cfg is None:
        rc = _config(args)
        cfg = {"config": rc.to_dict(), "config_hash": rc.hash()}
    doc = report.to_json()
    doc["config"] = cfg.get("config")
    doc["config_hash"] = cfg.get("config_hash")
    _write_json(out / "report.json", doc)
    c = report.curves
    _write_csv(out / "curves.csv", ("theta_px", "precision", "recall"),
               [[_f6(t), _f6(p), _f6(r)] for t, p, r in zip(c.thetas, c.precision, c.recall)])
    print(json.dumps(report.to_json(), indent=2))
    return EXIT_OK


PRE_KEYS = ("pre.low_pct", "pre.high_pct", "pre.gamma", "pre.sigma")


def _candidates(args) -> list[dict]:
    cands = []
    if args.candidates:
        try:
            data = json.loads(Path(args.candidates).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read candidates: {exc}", EXIT_USAGE)
        if not isinstance(data, list):
            raise CliError("candidate file must hold a JSON list of objects", EXIT_USAGE)
        cands.extend(data)
    for text in args.candidate or []:
        cands.append(parse_overrides([t for t in text.split(",") if t]))
    return cands


def sweep_scores(seq, candidates: list[PreprocessConfig]) -> list[float]:
    """Mean NRIQA score per candidate, with corpus statistics pooled over all candidates."""
    feats = [[quality_features(preprocess(f, pc)) for f in seq] for pc in candidates]
    stats = CorpusStats.fit([f for group in feats for f in group])
    return [float(np.mean([nriqa_score(f, stats) for f in group])) for group in feats]


def cmd_sweep(args) -> int:
    raw = _candidates(args)
    if len(raw) < 2:
        raise CliError(f"sweep needs at least 2 candidate configs, got {len(raw)}", EXIT_USAGE)
    base = _config(args)
    configs = []
    for i, c in enumerate(raw):
        if not isinstance(c, dict) or any(k not in PRE_KEYS for k in c):
            raise CliError(f"candidate {i} may only set {', '.join(PRE_KEYS)}", EXIT_USAGE)
        rc = RunConfig(base.to_dict())
        rc.update(c)
        configs.append(rc.preprocess())
    seq = _load(args.seq)
    scores = sweep_scores(seq, configs)
    order = sorted(range(len(configs)), key=lambda i: (-scores[i], i))
    out = _out_dir(args.out)
    rows = []
    for rank, i in enumerate(order, 1):
        pc = configs[i]
        rows.append([rank, i, _f6(pc.low_pct), _f6(pc.high_pct), _f6(pc.gamma), _f6(pc.sigma), _f6(scores[i])])
    _write_csv(out / "ranking.csv",
               ("rank", "candidate", "low_pct", "high_pct", "gamma", "sigma", "mean_score"), rows)
    best = configs[order[0]]
    winner = {"pre.low_pct": best.low_pct, "pre.high_pct": best.high_pct,
              "pre.gamma": best.gamma, "pre.sigma": best.sigma}
    _write_json(out / "best.json", winner)
    print(json.dumps({"winner": order[0], **winner}))
    return EXIT_OK


# ------------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of flat namespaced keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cinetrack", description=__doc__)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic sequence with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int)
    p.add_argument("--fps", type=float)
    p.add_argument("--pattern", choices=("sinusoid", "sin4", "static"))
    p.add_argument("--amplitude", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--distractor", action="store_true")
    p.add_argument("--blank", help="start:stop frame range where the target vanishes")
    _common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("score", help="per-frame quality scores and gate decisions")
    p.add_argument("seq")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("track", help="track a target through a sequence")
    p.add_argument("seq")
    p.add_argument("--init", required=True, help="x,y,w,h of the target in frame 0")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("segment", help="segment the tracked target in every valid frame")
    p.add_argument("seq")
    p.add_argument("--out", required=True)
    p.add_argument("--trajectory", help="trajectory.csv from a previous track run")
    p.add_argument("--with-track", action="store_true", help="track and segment in one pass")
    p.add_argument("--init", help="x,y,w,h (with --with-track)")
    p.add_argument("--gt", help="directory with gt_mask_NNNN.png for per-frame Dice")
    _common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score a trajectory (and masks) against ground truth")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--gt", required=True, help="directory with gt_centers.csv and gt masks")
    p.add_argument("--masks", help="directory with mask_NNNN.png")
    p.add_argument("--meta", help="meta.json giving the pixel spacing (default: GT directory)")
    p.add_argument("--theta", type=float, default=20.0, help="location error threshold, px")
    p.add_argument("--theta-mm", type=float, default=None, help="threshold in mm instead")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="rank preprocessing configs by mean quality score")
    p.add_argument("seq")
    p.add_argument("--candidates", help="JSON list of {pre.*: value} objects")
    p.add_argument("--candidate", action="append", help="comma-separated key=value list")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.threads is not None:
        import numba

        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
