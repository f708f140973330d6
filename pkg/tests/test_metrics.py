import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from refquery.data import LoadError, generate_synthetic, save_clip, write_dataset_manifest
from refquery.metrics import (MetricReport, boundary, contour_accuracy, default_tol_radius,
                              evaluate_dataset, jf_score, read_prediction, region_similarity,
                              write_prediction)
from refquery.oracles import brute_boundary, brute_boundary_f, brute_iou
from refquery.selfcheck import random_mask_pair

from conftest import small_spec

masks = hnp.arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1))


def square(h, w, y0, x0, side):
    m = np.zeros((h, w), np.uint8)
    m[y0:y0 + side, x0:x0 + side] = 1
    return m


# ----------------------------------------------------------------- J and F

def test_top_row_vs_left_column():
    a = np.array([[1, 1], [0, 0]])
    b = np.array([[1, 0], [1, 0]])
    assert region_similarity(a, b) == pytest.approx(1 / 3)


def test_empty_conventions():
    z = np.zeros((4, 4))
    one = square(4, 4, 1, 1, 2)
    assert region_similarity(z, z) == 1.0 and contour_accuracy(z, z) == 1.0
    assert region_similarity(z, one) == 0.0 and contour_accuracy(one, z) == 0.0
    assert jf_score(z, one)[2] == 0.0


def test_identical_masks_score_one():
    m = square(20, 20, 3, 4, 7)
    assert jf_score(m, m) == (1.0, 1.0, 1.0)


def test_shifted_square_against_oracle():
    a = square(16, 16, 4, 4, 6)
    b = square(16, 16, 4, 6, 6)
    assert region_similarity(a, b) == brute_iou(a.tolist(), b.tolist())
    assert contour_accuracy(a, b, 1) == brute_boundary_f(a.tolist(), b.tolist(), 1)
    assert contour_accuracy(a, b, 2) == 1.0


def test_boundary_of_filled_square_is_its_ring():
    b = boundary(square(6, 6, 1, 1, 4))
    assert b.sum() == 12 and not b[2:4, 2:4].any()
    assert boundary(np.ones((3, 3))).sum() == 8


def test_default_tolerance():
    assert default_tol_radius((480, 854)) == 8
    assert default_tol_radius((32, 32)) == 1


def test_shape_mismatch_is_an_error():
    with pytest.raises(ValueError):
        region_similarity(np.ones((2, 2)), np.ones((2, 3)))


def test_fifty_random_pairs_match_oracles():
    rng = np.random.default_rng(11)
    for _ in range(50):
        a, b = random_mask_pair(rng)
        tol = default_tol_radius(a.shape)
        assert region_similarity(a, b) == brute_iou(a.tolist(), b.tolist())
        assert contour_accuracy(a, b, tol) == brute_boundary_f(a.tolist(), b.tolist(), tol)
        assert set(zip(*map(list, np.nonzero(boundary(a))))) == set(map(tuple, brute_boundary(a.tolist())))


@settings(max_examples=60, deadline=None)
@given(masks, st.data())
def test_metrics_are_symmetric(a, data):
    b = data.draw(hnp.arrays(np.uint8, a.shape, elements=st.integers(0, 1)))
    assert region_similarity(a, b) == region_similarity(b, a)
    assert contour_accuracy(a, b, 1) == contour_accuracy(b, a, 1)


@settings(max_examples=40, deadline=None)
@given(masks, st.data(), st.integers(0, 5), st.integers(0, 5))
def test_translation_with_padding_is_invariant(a, data, dy, dx):
    b = data.draw(hnp.arrays(np.uint8, a.shape, elements=st.integers(0, 1)))
    h, w = a.shape

    def place(m):
        big = np.zeros((h + 6, w + 6), np.uint8)
        big[dy:dy + h, dx:dx + w] = m
        return big
    # interior placement changes which pixels touch the edge, so compare J only
    assert region_similarity(place(a), place(b)) == region_similarity(a, b)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_growing_overlap_raises_j(seed):
    rng = np.random.default_rng(seed)
    gt = (rng.random((10, 10)) < 0.5).astype(np.uint8)
    pred = np.zeros_like(gt)
    last = region_similarity(pred, gt)
    for y, x in zip(*np.nonzero(gt)):
        pred[y, x] = 1
        now = region_similarity(pred, gt)
        assert now >= last
        last = now
    assert last == 1.0


# ------------------------------------------------------------- predictions

def test_prediction_round_trip(tmp_path, rng):
    m = (rng.random((3, 5, 7)) < 0.5).astype(np.uint8)
    write_prediction(tmp_path / "p.json", "c1", m)
    cid, back = read_prediction(tmp_path / "p.json")
    assert cid == "c1" and np.array_equal(back, m)


def test_prediction_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(LoadError):
        read_prediction(tmp_path / "bad.json")
    (tmp_path / "other.json").write_text('{"format": "x"}')
    with pytest.raises(LoadError, match="not a prediction"):
        read_prediction(tmp_path / "other.json")


# ----------------------------------------------------------------- dataset

def gt_dir(tmp_path, seeds=(0, 1)):
    ids = []
    clips = []
    for s in seeds:
        c = generate_synthetic(small_spec(seed=s))
        save_clip(c, tmp_path / "gt" / c.clip_id)
        ids.append(c.clip_id)
        clips.append(c)
    write_dataset_manifest(tmp_path / "gt", ids)
    (tmp_path / "pred").mkdir()
    return clips


def test_perfect_predictions_score_one(tmp_path):
    for c in gt_dir(tmp_path):
        write_prediction(tmp_path / "pred" / f"{c.clip_id}.json", c.clip_id, c.target_mask())
    rep = evaluate_dataset(tmp_path / "pred", tmp_path / "gt")
    assert rep.mean() == (1.0, 1.0, 1.0)
    assert "100.0" in rep.table()


def test_empty_predictions_score_zero(tmp_path):
    for c in gt_dir(tmp_path):
        write_prediction(tmp_path / "pred" / f"{c.clip_id}.json", c.clip_id, np.zeros_like(c.target_mask()))
    assert evaluate_dataset(tmp_path / "pred", tmp_path / "gt").JF == 0.0


def test_dataset_average_is_mean_over_clips(tmp_path):
    clips = gt_dir(tmp_path)
    good, bad = clips
    write_prediction(tmp_path / "pred" / f"{good.clip_id}.json", good.clip_id, good.target_mask())
    write_prediction(tmp_path / "pred" / f"{bad.clip_id}.json", bad.clip_id, np.zeros_like(bad.target_mask()))
    rep = evaluate_dataset(tmp_path / "pred", tmp_path / "gt")
    assert rep.JF == pytest.approx(0.5)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "clip,J&F,J,F" and lines[-1].startswith("mean,0.500000")


def test_missing_prediction_is_named(tmp_path):
    clips = gt_dir(tmp_path)
    c = clips[0]
    write_prediction(tmp_path / "pred" / f"{c.clip_id}.json", c.clip_id, c.target_mask())
    with pytest.raises(LoadError, match=clips[1].clip_id):
        evaluate_dataset(tmp_path / "pred", tmp_path / "gt")


def test_empty_report():
    assert MetricReport().mean() == (0.0, 0.0, 0.0)
