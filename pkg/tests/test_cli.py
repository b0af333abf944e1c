import csv
import hashlib
import json
import shutil

import numpy as np
import pytest

from cinetrack.cli import main
from cinetrack.imaging import read_gray8, write_gray8


def _hashes(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir()) if p.is_file()}


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _init(seq_dir):
    return (seq_dir / "init_box.txt").read_text().strip()


@pytest.fixture(scope="module")
def seq_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("seq")
    assert main(["phantom", "--out", str(d), "--frames", "50", "--fps", "4.347"]) == 0
    return d


@pytest.fixture(scope="module")
def tracked(seq_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("track")
    assert main(["track", str(seq_dir), "--init", _init(seq_dir), "--out", str(out)]) == 0
    return out


def test_phantom_outputs_and_rerun_identical(seq_dir, tmp_path):
    names = {p.name for p in seq_dir.iterdir()}
    assert {"0000.png", "0049.png", "meta.json", "gt_centers.csv", "gt_mask_0000.png"} <= names
    assert len([n for n in names if n[:4].isdigit()]) == 50
    assert main(["phantom", "--out", str(tmp_path), "--frames", "50", "--fps", "4.347"]) == 0
    assert _hashes(tmp_path) == _hashes(seq_dir)


def test_phantom_missing_out():
    with pytest.raises(SystemExit) as exc:
        main(["phantom"])
    assert exc.value.code == 2


def test_phantom_bad_config(tmp_path):
    assert main(["phantom", "--out", str(tmp_path), "--set", "phantom.period=0"]) == 2


def test_track_writes_50_rows(tracked):
    rows = _rows(tracked / "trajectory.csv")
    assert len(rows) == 50 and rows[0]["valid"] == "1"
    assert list(rows[0]) == ["frame", "valid", "x_px", "y_px", "w_px", "h_px", "dx_mm", "dy_mm",
                             "confidence", "latency_ms"]
    assert (tracked / "quality.csv").is_file()
    rep = json.loads((tracked / "run.json").read_text())
    assert len(rep["config_hash"]) == 16 and rep["config"]["det.scale_step"] == 1.1


def test_track_static_all_valid(tmp_path):
    seq = tmp_path / "s"
    assert main(["phantom", "--out", str(seq), "--pattern", "static"]) == 0
    out = tmp_path / "t"
    assert main(["track", str(seq), "--init", _init(seq), "--out", str(out),
                 "--set", "nriqa.enabled=false"]) == 0
    assert all(r["valid"] == "1" for r in _rows(out / "trajectory.csv"))


def test_track_init_outside(seq_dir, tmp_path):
    assert main(["track", str(seq_dir), "--init", "310,150,24,18", "--out", str(tmp_path)]) == 2


def test_track_unreadable_sequence(tmp_path):
    assert main(["track", str(tmp_path / "nope"), "--init", "1,1,20,20", "--out", str(tmp_path / "o")]) == 3


def test_track_gate_rejects_frame0(seq_dir, tmp_path):
    seq = tmp_path / "noisy"
    shutil.copytree(seq_dir, seq)
    # a dropped-out (blank) first frame
    write_gray8(seq / "0000.png", np.full(read_gray8(seq / "0000.png").shape, 128, np.uint8))
    assert main(["track", str(seq), "--init", _init(seq), "--out", str(tmp_path / "o")]) == 4


def test_segment_missing_trajectory(seq_dir, tmp_path):
    assert main(["segment", str(seq_dir), "--trajectory", str(tmp_path / "none.csv"),
                 "--out", str(tmp_path / "o")]) == 3


def test_segment_and_eval(seq_dir, tracked, tmp_path):
    masks = tmp_path / "m"
    assert main(["segment", str(seq_dir), "--trajectory", str(tracked / "trajectory.csv"),
                 "--gt", str(seq_dir), "--out", str(masks)]) == 0
    seg = _rows(masks / "segmentation.csv")
    valid = [r["frame"] for r in _rows(tracked / "trajectory.csv") if r["valid"] == "1"]
    assert [r["frame"] for r in seg] == valid
    assert all(float(r["dice_vs_gt"]) >= 0.8 for r in seg)
    ev = tmp_path / "e"
    assert main(["eval", "--trajectory", str(tracked / "trajectory.csv"), "--gt", str(seq_dir),
                 "--masks", str(masks), "--out", str(ev)]) == 0
    rep = json.loads((ev / "report.json").read_text())
    assert rep["dice_global"] >= 0.82 and rep["theta_px"] == 20.0
    assert rep["config_hash"] is not None
    curves = _rows(ev / "curves.csv")
    assert len(curves) == 51 and float(curves[20]["recall"]) == pytest.approx(rep["recall"])


def test_segment_with_track(seq_dir, tmp_path):
    out = tmp_path / "wt"
    assert main(["segment", str(seq_dir), "--with-track", "--init", _init(seq_dir), "--out", str(out)]) == 0
    timing = _rows(out / "timing.csv")
    assert len(timing) >= 45 and (out / "trajectory.csv").is_file()


def test_eval_perfect_run(seq_dir, tmp_path):
    gt = _rows(seq_dir / "gt_centers.csv")
    lines = ["frame,valid,x_px,y_px,w_px,h_px,dx_mm,dy_mm,confidence,latency_ms"]
    c0 = (float(gt[0]["cx_px"]), float(gt[0]["cy_px"]))
    for r in gt:
        cx, cy = float(r["cx_px"]), float(r["cy_px"])
        lines.append(f"{r['frame']},1,{cx - 10:.6f},{cy - 10:.6f},20,20,"
                     f"{(cx - c0[0]) * 0.9:.6f},{(cy - c0[1]) * 0.9:.6f},1,50")
    (tmp_path / "trajectory.csv").write_text("\n".join(lines) + "\n")
    assert main(["eval", "--trajectory", str(tmp_path / "trajectory.csv"), "--gt", str(seq_dir),
                 "--out", str(tmp_path / "e")]) == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert rep["precision"] == 1.0 and rep["recall"] == 1.0 and rep["cc"] == pytest.approx(1.0)
    assert rep["mae_mm_mean"] == pytest.approx(0.0, abs=1e-5)


def test_eval_shuffled_gt(seq_dir, tracked, tmp_path):
    gt = tmp_path / "gt"
    shutil.copytree(seq_dir, gt)
    lines = (gt / "gt_centers.csv").read_text().splitlines()
    body = lines[1:]
    body[0], body[1] = body[1], body[0]
    (gt / "gt_centers.csv").write_text("\n".join([lines[0]] + body) + "\n")
    assert main(["eval", "--trajectory", str(tracked / "trajectory.csv"), "--gt", str(gt),
                 "--out", str(tmp_path / "e")]) == 3


def test_sweep_default_beats_identity(tmp_path):
    seq = tmp_path / "noisy"
    assert main(["phantom", "--out", str(seq), "--frames", "20", "--noise", "0.08"]) == 0
    out = tmp_path / "sw"
    assert main(["sweep", str(seq), "--candidate", "pre.low_pct=0,pre.high_pct=100,pre.gamma=1,pre.sigma=0",
                 "--candidate", "pre.gamma=0.8", "--out", str(out)]) == 0
    rows = _rows(out / "ranking.csv")
    assert [r["candidate"] for r in rows] == ["1", "0"]
    best = json.loads((out / "best.json").read_text())
    assert best == {"pre.low_pct": 1.0, "pre.high_pct": 99.0, "pre.gamma": 0.8, "pre.sigma": 0.7}


def test_sweep_ranking_rows(seq_dir, tmp_path):
    cands = tmp_path / "c.json"
    cands.write_text(json.dumps([{"pre.gamma": 1.0}, {}, {"pre.gamma": 1.2}]))
    out = tmp_path / "sw"
    assert main(["sweep", str(seq_dir), "--candidates", str(cands), "--out", str(out)]) == 0
    rows = _rows(out / "ranking.csv")
    assert len(rows) == 3 and sorted(int(r["rank"]) for r in rows) == [1, 2, 3]


def test_sweep_rejects_foreign_keys(seq_dir, tmp_path):
    assert main(["sweep", str(seq_dir), "--candidate", "det.min_win=14", "--candidate", "pre.gamma=1",
                 "--out", str(tmp_path)]) == 2


def test_sweep_single_candidate(seq_dir, tmp_path):
    assert main(["sweep", str(seq_dir), "--candidate", "pre.gamma=1", "--out", str(tmp_path)]) == 2


def test_score(seq_dir, tmp_path):
    assert main(["score", str(seq_dir), "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "quality.csv")
    assert len(rows) == 50 and sum(r["admitted"] == "0" for r in rows) >= 1
