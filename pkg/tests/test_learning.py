import numpy as np
import pytest

from cinetrack.detector import (
    DetectorParams,
    Integrals,
    ScanResult,
    detect,
    nn_similarity,
    relative_similarity,
    scan,
    update_search_region,
)
from cinetrack.imaging import BoundingBox, iou, iou_many, sample_patch
from cinetrack.learning import LearnParams, LearningError, init_model, n_expert, p_expert
from cinetrack.phantom import Blob, PhantomConfig, generate
from cinetrack.preprocess import preprocess

from conftest import textured


@pytest.fixture(scope="module")
def twin_scene():
    """Frame with a look-alike of the target far away from it."""
    cfg = PhantomConfig(distractor=Blob(axes=(10.0, 7.0), contrast=0.35, offset=(-70.0, 60.0)))
    seq, _ = generate(cfg)
    img = preprocess(seq[0]).pixels
    return img, cfg.init_box()


@pytest.fixture
def fresh(default_phantom):
    cfg, seq, _ = default_phantom
    img = preprocess(seq[0]).pixels
    box = cfg.init_box()
    model, grid = init_model(img, box)
    return img, box, model, grid


def test_init_self_similarity(fresh):
    img, box, model, grid = fresh
    assert nn_similarity(sample_patch(img, box, model.side), model) == 1.0
    assert len(model.pos_patches) == 21
    assert model.init_variance > 0


def test_init_self_detection(fresh):
    img, box, model, grid = fresh
    dets = detect(img, grid, model, None)
    assert any(iou(b, box) >= 0.7 for b, _ in dets)


def test_init_rejects_textureless():
    img = np.full((100, 100), 0.4)
    with pytest.raises(LearningError, match="variance"):
        init_model(img, BoundingBox(30, 30, 20, 20))


def test_init_rejects_small_or_outside():
    img = textured((100, 100), 2.0, 0)
    with pytest.raises(LearningError):
        init_model(img, BoundingBox(30, 30, 10, 20))
    with pytest.raises(LearningError):
        init_model(img, BoundingBox(90, 30, 20, 20))


def test_p_expert_includes_grid_box(fresh):
    img, box, model, grid = fresh
    on_grid = grid.box(len(grid) // 2 + 17)
    before = model.pos_counts.copy()
    n = p_expert(img, on_grid, grid, model)
    assert n == 10
    # the exact grid box's own codes were counted as positive
    from cinetrack.detector import fern_codes_frame

    codes = fern_codes_frame(img, np.array([on_grid.as_tuple()]), model.pairs, model.side)[0]
    f = np.arange(len(codes))
    assert np.all(model.pos_counts[f, codes] > before[f, codes])


def test_p_expert_without_overlaps_updates_no_ferns(fresh):
    img, box, model, grid = fresh
    # a box far smaller than any grid scale has no grid box with IoU >= 0.6
    tiny = BoundingBox(100.0, 100.0, 4.0, 4.0)
    before = model.pos_counts.copy()
    assert p_expert(img, tiny, grid, model) == 0
    np.testing.assert_array_equal(model.pos_counts, before)


def test_p_expert_requery_is_one(default_phantom, fresh):
    cfg, seq, gt = default_phantom
    _, box, model, grid = fresh
    img5 = preprocess(seq[5]).pixels
    cx, cy = gt.centers[5]
    trusted = BoundingBox.from_center(cx, cy, box.w, box.h)
    p_expert(img5, trusted, grid, model)
    assert nn_similarity(sample_patch(img5, trusted, model.side), model) == 1.0


def test_n_expert_overlap_guard(fresh):
    img, _, model, grid = fresh
    # trusted box = a grid box; its IoU-1 self and close neighbours are not negatives
    box = grid.box(int(np.argmax(iou_many(fresh[1], grid.boxes))))
    idx = np.flatnonzero(iou_many(box, grid.boxes) >= 0.8)
    assert len(idx) > 1
    res = ScanResult(idx, idx, idx, np.zeros((len(idx), model.pairs.shape[0]), np.int64),
                     np.ones(len(idx)), np.ones(len(idx)), np.zeros((len(idx), model.side ** 2)), [])
    neg_before = model.neg_counts.copy()
    n_neg = len(model.neg_patches)
    assert n_expert(img, box, res, grid, model) == 0
    np.testing.assert_array_equal(model.neg_counts, neg_before)
    assert len(model.neg_patches) == n_neg


def test_n_expert_empty(fresh):
    img, box, model, grid = fresh
    e = np.zeros(0, dtype=np.intp)
    res = ScanResult(e, e, e, np.zeros((0, 10), np.int64), np.zeros(0), np.zeros(0),
                     np.zeros((0, 144)), [])
    fp = model.fingerprint()
    assert n_expert(img, box, res, grid, model) == 0
    assert model.fingerprint() == fp


def test_distractor_posterior_decreases(twin_scene):
    img, box = twin_scene
    model, grid = init_model(img, box)
    res = scan(img, Integrals.of(img), grid, model, None, DetectorParams())
    far = iou_many(box, grid.boxes[res.fern_passed]) < 0.2
    assert np.any(far), "look-alike never passed the fern stage"
    codes = res.fern_codes[far]
    before = model.posterior(codes)
    n_expert(img, box, res, grid, model)
    after = model.posterior(codes)
    assert np.all(after < before)


def test_bounded_memory_and_monotone_counts(fresh, default_phantom):
    cfg, seq, gt = default_phantom
    _, box, model, grid = fresh
    params = LearnParams(max_patches=10)
    model.max_patches = 10
    for k in range(1, 12):
        img = preprocess(seq[k]).pixels
        cx, cy = gt.centers[k]
        tb = BoundingBox.from_center(cx, cy, box.w, box.h)
        pos0, neg0 = model.pos_counts.copy(), model.neg_counts.copy()
        res = scan(img, Integrals.of(img), grid, model, None)
        p_expert(img, tb, grid, model, params)
        n_expert(img, tb, res, grid, model, params)
        # a few random shifts force insertions beyond the cap
        model.add_positive(np.random.default_rng(k).standard_normal(144))
        model.add_negative(np.random.default_rng(k + 100).standard_normal(144))
        assert len(model.pos_patches) <= 10 and len(model.neg_patches) <= 10
        assert np.all(model.pos_counts >= pos0) and np.all(model.neg_counts >= neg0)


def test_learn_params_invariants():
    with pytest.raises(ValueError):
        LearnParams(pos_overlap=0.2, neg_overlap=0.3)
    with pytest.raises(ValueError):
        LearnParams(max_patches=5)


def test_init_is_deterministic(default_phantom):
    cfg, seq, _ = default_phantom
    img = preprocess(seq[0]).pixels
    a, _ = init_model(img, cfg.init_box())
    b, _ = init_model(img, cfg.init_box())
    assert a.fingerprint() == b.fingerprint()
