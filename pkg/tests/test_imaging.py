import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cinetrack.imaging import (
    BoundingBox,
    Frame,
    ImagingError,
    NormalizedPatch,
    Sequence,
    bilinear,
    box_from_string,
    crop_patch,
    iou,
    iou_many,
    load_sequence,
    resample_normalize,
    round_half_up,
    sample_patch,
    save_sequence,
    write_gray8,
)


def _write_seq(d, arrays, spacing=0.571, fps=4.347, ext="pgm"):
    for k, a in enumerate(arrays):
        write_gray8(d / f"{k:04d}.{ext}", a)
    (d / "meta.json").write_text(json.dumps({"spacing_mm_x": spacing, "spacing_mm_y": spacing,
                                             "fps": fps, "scanner": "ignored"}))


def test_load_three_pgm_frames(tmp_path, rng):
    arrays = [rng.integers(0, 256, (320, 320), dtype=np.uint8) for _ in range(3)]
    _write_seq(tmp_path, arrays)
    seq = load_sequence(tmp_path)
    assert len(seq) == 3
    assert seq.spacing == (0.571, 0.571)
    assert seq.fps == pytest.approx(4.347)
    for k, fr in enumerate(seq):
        assert fr.index == k
        np.testing.assert_array_equal(fr.pixels, arrays[k] / 255.0)


def test_load_all_zero_frame(tmp_path):
    _write_seq(tmp_path, [np.zeros((20, 24), np.uint8)])
    seq = load_sequence(tmp_path)
    assert seq[0].width == 24 and seq[0].height == 20
    assert np.all(seq[0].pixels == 0.0)


def test_load_dimension_mismatch_names_file(tmp_path):
    _write_seq(tmp_path, [np.zeros((320, 320), np.uint8), np.zeros((320, 319), np.uint8)])
    with pytest.raises(ImagingError, match="0001.pgm"):
        load_sequence(tmp_path)


def test_load_missing_metadata(tmp_path):
    write_gray8(tmp_path / "0000.png", np.zeros((16, 16), np.uint8))
    with pytest.raises(ImagingError, match="meta"):
        load_sequence(tmp_path)


def test_load_rejects_colour_image(tmp_path):
    from PIL import Image

    Image.fromarray(np.zeros((16, 16, 3), np.uint8), mode="RGB").save(tmp_path / "0000.png")
    (tmp_path / "meta.json").write_text('{"spacing_mm_x": 1, "spacing_mm_y": 1, "fps": 1}')
    with pytest.raises(ImagingError):
        load_sequence(tmp_path)


def test_save_load_roundtrip_is_deterministic(tmp_path, rng):
    seq = Sequence.from_arrays([rng.integers(0, 256, (32, 40)) / 255.0 for _ in range(4)], (0.9, 0.8), 5.0)
    save_sequence(seq, tmp_path / "a")
    a = load_sequence(tmp_path / "a")
    b = load_sequence(tmp_path / "a")
    for fa, fb, fo in zip(a, b, seq):
        np.testing.assert_array_equal(fa.pixels, fb.pixels)
        np.testing.assert_allclose(fa.pixels, fo.pixels, atol=1e-12)
    assert a.spacing == (0.9, 0.8)


def test_frame_invariants():
    with pytest.raises(ImagingError):
        Frame(np.zeros((15, 20)), (1.0, 1.0), 0, 0.0)
    with pytest.raises(ImagingError):
        Frame(np.full((16, 16), 1.5), (1.0, 1.0), 0, 0.0)
    with pytest.raises(ImagingError):
        Frame(np.zeros((16, 16)), (0.0, 1.0), 0, 0.0)
    f = Frame(np.zeros((16, 16)), (1.0, 1.0), 0, 0.0)
    with pytest.raises(ValueError):
        f.pixels[0, 0] = 1.0


def test_sequence_invariants():
    a = Frame(np.zeros((16, 16)), (1.0, 1.0), 0, 0.0)
    b = Frame(np.zeros((16, 16)), (2.0, 1.0), 1, 0.1)
    with pytest.raises(ImagingError):
        Sequence((a, b), 10.0)
    with pytest.raises(ImagingError):
        Sequence((a,), 0.0)


def test_box_basics():
    b = BoundingBox(10, 20, 4, 6)
    assert b.center == (12.0, 23.0)
    assert b.in_frame(14, 26) and not b.in_frame(13, 26)
    assert b.scaled(2.0).area == pytest.approx(4 * b.area)
    assert b.scaled(2.0).center == b.center
    with pytest.raises(ImagingError):
        BoundingBox(0, 0, 0, 5)
    assert box_from_string("1,2,3.5,4").as_tuple() == (1, 2, 3.5, 4)
    with pytest.raises(ImagingError):
        box_from_string("1,2,3")


def test_round_half_up():
    assert [round_half_up(v) for v in (0.5, 1.5, 2.5, -0.5, 2.4999)] == [1, 2, 3, 0, 2]


def test_iou_many_matches_scalar(rng):
    a = BoundingBox(10, 10, 20, 15)
    boxes = np.column_stack([rng.uniform(0, 40, 50), rng.uniform(0, 40, 50),
                             rng.uniform(1, 30, 50), rng.uniform(1, 30, 50)])
    expect = [iou(a, BoundingBox(*r)) for r in boxes]
    np.testing.assert_allclose(iou_many(a, boxes), expect, atol=1e-15)
    assert iou(a, a) == 1.0


def test_crop_full_frame_is_identity(rng):
    f = Frame(rng.random((20, 30)), (1, 1), 0, 0)
    np.testing.assert_array_equal(crop_patch(f, BoundingBox(0, 0, 30, 20)), f.pixels)


def test_crop_unit_box(rng):
    f = Frame(rng.random((20, 30)), (1, 1), 0, 0)
    p = crop_patch(f, BoundingBox(10, 10, 1, 1))
    assert p.shape == (1, 1) and p[0, 0] == f.pixels[10, 10]


def test_crop_ramp_sum():
    h, w = 32, 40
    ramp = (np.arange(w)[None, :] + 2 * np.arange(h)[:, None]) / (w + 2 * h)
    f = Frame(ramp, (1, 1), 0, 0)
    x0, y0 = 5, 7
    p = crop_patch(f, BoundingBox(x0, y0, 12, 12))
    # sum of (x + 2y) over the 12x12 block, computed in closed form
    sx = sum(range(x0, x0 + 12))
    sy = sum(range(y0, y0 + 12))
    expect = (12 * sx + 2 * 12 * sy) / (w + 2 * h)
    assert p.sum() == pytest.approx(expect, abs=1e-12)


def test_crop_rounds_half_up_and_rejects_outside(rng):
    f = Frame(rng.random((20, 20)), (1, 1), 0, 0)
    assert crop_patch(f, BoundingBox(0.5, 0.5, 3.5, 2.5)).shape == (3, 4)
    with pytest.raises(ImagingError):
        crop_patch(f, BoundingBox(15, 15, 10, 10))


def test_resample_constant_patch_is_zero():
    p = resample_normalize(np.full((17, 9), 0.3), 12)
    assert p.side == 12 and np.all(np.abs(p.values) < 1e-15)


def test_resample_identity_size(rng):
    a = rng.random((12, 12))
    p = resample_normalize(a, 12)
    np.testing.assert_allclose(p.values, (a - a.mean()).ravel(), atol=1e-15)


def _reference_bilinear(img, x, y):
    h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = x - x0, y - y0
    return ((1 - ax) * (1 - ay) * img[y0, x0] + ax * (1 - ay) * img[y0, x1]
            + (1 - ax) * ay * img[y1, x0] + ax * ay * img[y1, x1])


def test_resample_gradient_matches_reference():
    a = np.add.outer(np.arange(24) * 0.01, np.arange(24) * 0.02)
    p = resample_normalize(a, 12)
    ref = np.array([[_reference_bilinear(a, (j + 0.5) * 2 - 0.5, (i + 0.5) * 2 - 0.5)
                     for j in range(12)] for i in range(12)])
    np.testing.assert_allclose(p.as_image(), ref - ref.mean(), atol=1e-6)
    assert abs(p.values.mean()) < 1e-6


def test_resample_rejects_small_side():
    with pytest.raises(ImagingError):
        resample_normalize(np.zeros((5, 5)), 3)


def test_sample_patch_equals_crop_then_resample(rng):
    f = Frame(rng.random((40, 50)), (1, 1), 0, 0)
    box = BoundingBox(7, 9, 24, 18)
    a = sample_patch(f.pixels, box, 12)
    b = resample_normalize(crop_patch(f, box), 12)
    np.testing.assert_allclose(a.values, b.values, atol=1e-12)


def test_normalized_patch_checks_length():
    with pytest.raises(ImagingError):
        NormalizedPatch(4, np.zeros(15))


@given(st.floats(-5, 30), st.floats(-5, 30))
def test_bilinear_matches_reference(x, y):
    img = np.arange(20 * 25, dtype=float).reshape(20, 25) % 7 / 7.0
    got = bilinear(img, np.array([x]), np.array([y]))[0]
    assert got == pytest.approx(_reference_bilinear(img, x, y), abs=1e-12)
