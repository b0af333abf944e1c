import numpy as np
import pytest
from hypothesis import given, strategies as st

from cinetrack.imaging import BoundingBox
from cinetrack.metrics import dice
from cinetrack.phantom import PhantomConfig, generate
from cinetrack.pipeline import run
from cinetrack.segmentation import (
    CvParams,
    cv_sweep,
    energy,
    energy_terms,
    init_mask,
    minimize,
    segment_frame,
    shift_mask,
)


def brute_energy(img, mask, p):
    """Direct double loop over pixels and neighbour pairs."""
    h, w = img.shape
    ins = [img[y, x] for y in range(h) for x in range(w) if mask[y, x]]
    out = [img[y, x] for y in range(h) for x in range(w) if not mask[y, x]]
    c1 = sum(ins) / len(ins) if ins else 0.0
    c2 = sum(out) / len(out) if out else 0.0
    per = 0
    for y in range(h):
        for x in range(w):
            if x + 1 < w and mask[y, x] != mask[y, x + 1]:
                per += 1
            if y + 1 < h and mask[y, x] != mask[y + 1, x]:
                per += 1
    fit = p.lambda1 * sum((v - c1) ** 2 for v in ins) + p.lambda2 * sum((v - c2) ** 2 for v in out)
    return p.mu * per + p.nu * len(ins) + fit


def two_blobs():
    img = np.full((40, 40), 0.1)
    yy, xx = np.mgrid[:40, :40]
    bright = (xx - 12) ** 2 + (yy - 14) ** 2 <= 36
    img[bright] = 0.9
    img[(xx - 30) ** 2 + (yy - 28) ** 2 <= 25] = 0.3
    return img, bright


def test_init_mask_area_10x10():
    m = init_mask(BoundingBox(20, 20, 10, 10), (64, 64))
    assert 70 <= m.sum() <= 80


def test_init_mask_tiny_box_nonempty():
    assert init_mask(BoundingBox(5, 5, 2, 2), (16, 16)).any()


def test_init_mask_at_edge_clipped():
    m = init_mask(BoundingBox(0, 0, 10, 10), (32, 32))
    assert m.shape == (32, 32) and m[0:10, 0:10].sum() == m.sum() > 0


def test_piecewise_constant_zero_energy():
    img, bright = two_blobs()
    img = np.where(bright, 0.9, 0.1)
    t = energy_terms(img, bright, CvParams(mu=0.0))
    assert t.energy == pytest.approx(0.0, abs=1e-12)


def test_uniform_image_means():
    img = np.full((20, 20), 0.37)
    t = energy_terms(img, init_mask(BoundingBox(5, 5, 10, 10), (20, 20)), CvParams(mu=0.0))
    assert t.c1 == pytest.approx(0.37) and t.c2 == pytest.approx(0.37)
    assert t.energy == pytest.approx(0.0, abs=1e-12)


def test_empty_mask_flagged_degenerate():
    t = energy_terms(np.random.default_rng(0).random((16, 16)), np.zeros((16, 16), bool))
    assert t.degenerate and t.c1 == 0.0


@given(st.integers(0, 10 ** 6), st.floats(0, 1), st.floats(-0.5, 0.5))
def test_energy_matches_brute_force(seed, mu, nu):
    rng = np.random.default_rng(seed)
    img = rng.random((16, 16))
    mask = rng.random((16, 16)) < 0.4
    p = CvParams(mu=mu, nu=nu)
    assert energy(img, mask, p) == pytest.approx(brute_energy(img, mask, p), abs=1e-9)


def test_fixed_point_unchanged():
    img, bright = two_blobs()
    p = CvParams(mu=0.01, tol=0.0, max_iters=200)
    m, _ = minimize(img, init_mask(BoundingBox(5, 7, 14, 14), img.shape[::-1]), p)
    m2, changed = cv_sweep(img, m, p)
    assert changed == 0
    np.testing.assert_array_equal(m, m2)


def test_two_blob_recovers_bright_region():
    img, bright = two_blobs()
    seed = init_mask(BoundingBox(7, 9, 10, 10), (40, 40))
    m, _ = minimize(img, seed, CvParams(mu=0.01, nu=0.0, tol=0.0, max_iters=200))
    np.testing.assert_array_equal(m, bright)


@given(st.integers(0, 10 ** 6))
def test_each_sweep_lowers_energy_and_means_consistent(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((20, 20))
    p = CvParams(mu=0.2, tol=0.0)
    mask = rng.random((20, 20)) < 0.5
    e = energy(img, mask, p)
    for _ in range(30):
        new, changed = cv_sweep(img, mask, p)
        e_new = energy(img, new, p)
        if changed == 0:
            assert e_new == e
            break
        assert e_new < e
        mask, e = new, e_new
        t = energy_terms(img, mask, p)
        assert t.c1 == pytest.approx(img[mask].mean(), abs=1e-9)
        assert t.c2 == pytest.approx(img[~mask].mean(), abs=1e-9)


def test_single_flip_delta_is_exact():
    # one sweep on a mask that differs from the optimum by one pixel flips that pixel
    img, bright = two_blobs()
    p = CvParams(mu=0.01)
    m = bright.copy()
    m[14, 12] = False
    out, changed = cv_sweep(img, m, p)
    assert changed == 1 and energy(img, out, p) < energy(img, m, p)


def test_max_iters_bounds_sweeps():
    rng = np.random.default_rng(3)
    img = rng.random((24, 24))
    _, iters = minimize(img, rng.random((24, 24)) < 0.5, CvParams(mu=0.0, tol=0.0, max_iters=3))
    assert iters <= 3


def test_translation_equivariance():
    img, _ = two_blobs()
    big = np.full((60, 60), 0.1)
    big[5:45, 5:45] = img
    box = BoundingBox(12, 14, 14, 14)
    p = CvParams(mu=0.01)
    a = segment_frame(big, box, p)
    shifted = np.full((60, 60), 0.1)
    shifted[8:48, 10:50] = img
    b = segment_frame(shifted, box.translated(5, 3), p)
    np.testing.assert_array_equal(shift_mask(a.mask, 5, 3), b.mask)


def test_warm_start_fixed_point(static_phantom):
    cfg, seq, gt = static_phantom
    img = seq[0].pixels
    box = cfg.init_box()
    first = segment_frame(img, box, CvParams(tol=0.0, max_iters=200))
    again = segment_frame(img, box, CvParams(), prev_mask=first.mask)
    assert again.iters_used <= 2
    np.testing.assert_array_equal(again.mask, first.mask)


def test_static_phantom_dice(static_phantom):
    cfg, seq, gt = static_phantom
    traj = run(seq, cfg.init_box())
    prev = None
    for r, frame, g in zip(traj.results, seq, gt.masks):
        res = segment_frame(frame.pixels, r.box, CvParams(), prev)
        prev = res.mask
        assert dice(res.mask, g) >= 0.90


def test_outside_center_rejected():
    with pytest.raises(ValueError):
        segment_frame(np.zeros((20, 20)), BoundingBox(30, 30, 4, 4))


def test_params_invariants():
    with pytest.raises(ValueError):
        CvParams(max_iters=0)
    with pytest.raises(ValueError):
        CvParams(tol=1.0)
