import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dinseg.errors import ShapeError
from dinseg.metrics import (
    adb,
    aggregate,
    boundary_extract,
    class_metrics,
    dice,
    evaluate,
    hausdorff,
    iou,
    object_dice,
    object_hausdorff,
    object_match,
    precision_recall_f1,
)

from _oracles import adb_oracle, boundary_oracle, hausdorff_oracle, overlap_oracle


def mask(shape, cells):
    m = np.zeros(shape, dtype=bool)
    for p in cells:
        m[p] = True
    return m


def square(shape, top, left, side, value=1):
    y = np.zeros(shape, dtype=np.int64)
    y[top : top + side, left : left + side] = value
    return y


nonempty_pairs = st.integers(2, 12).flatmap(
    lambda n: st.tuples(
        hnp.arrays(bool, (n, n), elements=st.booleans()).filter(np.any),
        hnp.arrays(bool, (n, n), elements=st.booleans()).filter(np.any),
    )
)


# --------------------------------------------------------------------------
# overlap


def test_identical_masks():
    a = mask((3, 3), [(0, 0), (1, 2)])
    assert dice(a, a) == iou(a, a) == 1.0


def test_disjoint_masks():
    a, b = mask((2, 2), [(0, 0)]), mask((2, 2), [(1, 1)])
    assert dice(a, b) == iou(a, b) == 0.0
    assert precision_recall_f1(a, b) == (0.0, 0.0, 0.0)


def test_hand_enumerated_overlap():
    a, b = mask((2, 2), [(0, 0), (0, 1)]), mask((2, 2), [(0, 1), (1, 1)])
    assert dice(a, b) == 0.5
    assert iou(a, b) == pytest.approx(1 / 3, abs=1e-15)


def test_empty_conventions():
    e = np.zeros((3, 3), bool)
    assert dice(e, e) == iou(e, e) == 1.0
    assert precision_recall_f1(e, e) == (1.0, 1.0, 1.0)
    assert precision_recall_f1(mask((3, 3), [(0, 0)]), e) == (0.0, 0.0, 0.0)


def test_shape_mismatch_errors():
    with pytest.raises(ShapeError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))


def test_precision_recall_values():
    gt = mask((1, 4), [(0, 0), (0, 1), (0, 2)])
    pred = mask((1, 4), [(0, 2), (0, 3)])
    p, r, f = precision_recall_f1(gt, pred)
    assert (p, r) == (0.5, 1 / 3)
    assert f == pytest.approx(2 * 0.5 * (1 / 3) / (0.5 + 1 / 3))


@given(pair=nonempty_pairs)
def test_iou_le_dice(pair):
    a, b = pair
    d, j = dice(a, b), iou(a, b)
    assert j <= d
    assert (j == d) == (d in (0.0, 1.0))


# --------------------------------------------------------------------------
# boundaries


def test_boundary_single_pixel():
    assert boundary_extract(mask((3, 3), [(1, 1)])).tolist() == [[1, 1]]


def test_boundary_square():
    b = boundary_extract(np.ones((3, 3), bool))
    assert len(b) == 8 and [1, 1] not in b.tolist()


def test_boundary_cube():
    cube = np.zeros((6, 6, 6), bool)
    cube[1:5, 1:5, 1:5] = True
    got = {tuple(p) for p in boundary_extract(cube).tolist()}
    assert len(got) == 56 == len(boundary_oracle(cube))
    assert got == boundary_oracle(cube)


@settings(max_examples=100, deadline=None)
@given(m=hnp.arrays(bool, hnp.array_shapes(min_dims=2, max_dims=3, min_side=1, max_side=6), elements=st.booleans()))
def test_boundary_matches_neighbour_scan(m):
    assert {tuple(p) for p in boundary_extract(m).tolist()} == boundary_oracle(m)


# --------------------------------------------------------------------------
# distances


def test_distances_identical_masks_are_zero():
    a = square((6, 6), 1, 1, 3).astype(bool)
    assert adb(a, a) == hausdorff(a, a) == 0.0


def test_distances_single_pixels_five_apart():
    a, b = mask((8, 8), [(0, 0)]), mask((8, 8), [(3, 4)])
    assert adb(a, b) == hausdorff(a, b) == 5.0


def test_distances_shifted_square_match_brute_force():
    a = square((8, 8), 1, 1, 3).astype(bool)
    b = square((8, 8), 3, 1, 3).astype(bool)
    assert adb(a, b) == adb_oracle(a, b)
    assert hausdorff(a, b) == hausdorff_oracle(a, b) == 2.0


def test_distances_reject_empty():
    e = np.zeros((3, 3), bool)
    with pytest.raises(ValueError):
        adb(e, mask((3, 3), [(0, 0)]))
    with pytest.raises(ValueError):
        hausdorff(mask((3, 3), [(0, 0)]), e)


def test_distances_3d():
    a = mask((4, 4, 4), [(0, 0, 0)])
    b = mask((4, 4, 4), [(1, 2, 2)])
    assert hausdorff(a, b) == 3.0


@settings(max_examples=150, deadline=None)
@given(pair=nonempty_pairs)
def test_distance_properties(pair):
    a, b = pair
    assert adb(a, b) == adb_oracle(a, b) == adb(b, a)
    assert hausdorff(a, b) == hausdorff_oracle(a, b) == hausdorff(b, a)
    assert adb(a, b) <= hausdorff(a, b)
    assert dice(a, b) == dice(b, a) and iou(a, b) == iou(b, a)


@settings(max_examples=50, deadline=None)
@given(pair=nonempty_pairs, dr=st.integers(0, 5), dc=st.integers(0, 5))
def test_metrics_translation_invariant(pair, dr, dc):
    a, b = pair
    n = a.shape[0]
    big = lambda m: np.pad(m, ((dr, 5 - dr), (dc, 5 - dc)))
    A, B = big(a), big(b)
    assert dice(A, B) == dice(a, b) and iou(A, B) == iou(a, b)
    assert adb(A, B) == adb(a, b) and hausdorff(A, B) == hausdorff(a, b)
    assert A.shape == (n + 5, n + 5)


# --------------------------------------------------------------------------
# objects


def test_match_identical_single_object():
    y = square((6, 6), 1, 1, 3)
    m = object_match(y, y)
    assert m.pairs == [(1, 1, 9)] and not m.unmatched_gt and not m.unmatched_pred
    assert m.f1 == 1.0


def test_match_empty_prediction():
    m = object_match(square((6, 6), 1, 1, 3), np.zeros((6, 6), int))
    assert m.pairs == [] and m.unmatched_gt == [1] and m.f1 == 0.0


def test_match_one_of_two():
    gt = square((10, 10), 0, 0, 3) + square((10, 10), 6, 6, 3)
    pred = square((10, 10), 0, 0, 3)
    m = object_match(gt, pred)
    assert len(m.pairs) == 1 and len(m.unmatched_gt) == 1 and not m.unmatched_pred
    assert m.f1 == pytest.approx(2 / 3)


def test_match_requires_half_of_gt():
    gt = square((6, 6), 0, 0, 4)  # 16 px
    pred = np.zeros((6, 6), int)
    pred[0:2, 0:3] = 1  # 6 px overlap < 8
    assert object_match(gt, pred).pairs == []
    pred[0:2, 0:4] = 1  # 8 px overlap == half
    assert len(object_match(gt, pred).pairs) == 1


def test_match_is_one_to_one():
    gt = np.zeros((4, 8), int)
    gt[:, 0:4] = 1
    pred = np.zeros((4, 8), int)
    pred[:, 0:4] = 1
    pred[0, 5] = 1
    m = object_match(gt, pred)
    assert len(m.pairs) == 1 and m.unmatched_pred == [2]


@given(n=st.integers(1, 5))
def test_object_f1_perfect_for_any_count(n):
    y = sum(square((6 * n, 6), 6 * i, 1, 3) for i in range(n))
    assert object_match(y, y).f1 == 1.0


def test_object_scores_identical_maps():
    y = square((12, 12), 1, 1, 3) + square((12, 12), 7, 7, 4)
    assert object_dice(y, y) == 1.0
    assert object_hausdorff(y, y) == 0.0


def test_object_dice_deleted_object():
    big, small = square((12, 12), 0, 0, 4), square((12, 12), 8, 8, 2)
    gt = big + small
    od = object_dice(gt, big)
    # gt half loses the small object's weight; pred half is perfect
    assert od == pytest.approx(0.5 * 16 / 20 + 0.5 * 1.0)
    assert od <= 1 - 0.5 * 4 / 20 + 1e-12


def test_object_scores_two_object_hand_computation():
    gt = square((12, 12), 0, 0, 4) + square((12, 12), 8, 8, 2)  # sizes 16, 4
    pred = np.zeros((12, 12), int)
    pred[0:4, 0:3] = 1  # 12 px inside gt object 1
    pred[8:10, 8:10] = 1
    pred[9, 10] = 1  # 5 px covering gt object 2
    d1 = 2 * 12 / (16 + 12)
    d2 = 2 * 4 / (4 + 5)
    expected = 0.5 * (16 * d1 + 4 * d2) / 20 + 0.5 * (12 * d1 + 5 * d2) / 17
    assert object_dice(gt, pred) == pytest.approx(expected, abs=1e-12)
    top = (np.arange(12) < 4)[:, None]
    h1 = hausdorff(square((12, 12), 0, 0, 4), (pred > 0) & top)
    h2 = hausdorff(square((12, 12), 8, 8, 2), (pred > 0) & ~top)
    expected_h = 0.5 * (16 * h1 + 4 * h2) / 20 + 0.5 * (12 * h1 + 5 * h2) / 17
    assert object_hausdorff(gt, pred) == pytest.approx(expected_h, abs=1e-12)


def test_object_hausdorff_unmatched_uses_nearest():
    gt = square((12, 12), 0, 0, 2)
    pred = square((12, 12), 6, 6, 2)
    h = hausdorff(gt, pred)
    assert object_match(gt, pred).pairs == []
    assert object_hausdorff(gt, pred) == pytest.approx(h)


def test_object_scores_need_objects():
    e = np.zeros((4, 4), int)
    with pytest.raises(ValueError):
        object_dice(e, e)
    with pytest.raises(ValueError):
        object_hausdorff(square((4, 4), 0, 0, 2), e)


# --------------------------------------------------------------------------
# reports


def test_evaluate_perfect():
    y = square((10, 10), 1, 1, 3) + square((10, 10), 6, 6, 3, value=2)
    r = evaluate(y, y, 2)
    for cm in r.per_class.values():
        assert (cm.dice, cm.iou, cm.precision, cm.recall, cm.f1) == (1.0,) * 5
        assert cm.adb == cm.hausdorff == 0.0
    assert r.objects.f1 == r.objects.object_dice == 1.0 and r.objects.object_hausdorff == 0.0


def test_evaluate_all_background_prediction():
    y = square((10, 10), 1, 1, 3) + square((10, 10), 6, 6, 3, value=2)
    r = evaluate(y, np.zeros_like(y), 2)
    for cm in r.per_class.values():
        assert cm.dice == 0.0 and cm.adb is None and cm.hausdorff is None
    assert r.objects.object_hausdorff is None and r.objects.object_dice == 0.0


def test_evaluate_equals_composition_of_ops():
    rng = np.random.default_rng(5)
    gt = rng.integers(0, 3, size=(12, 12)) * (rng.random((12, 12)) < 0.5)
    pred = rng.integers(0, 3, size=(12, 12)) * (rng.random((12, 12)) < 0.5)
    r = evaluate(gt, pred, 2)
    for k in (1, 2):
        a, b = gt == k, pred == k
        cm = r.per_class[str(k)]
        assert cm.dice == dice(a, b) and cm.iou == iou(a, b)
        assert (cm.precision, cm.recall, cm.f1) == precision_recall_f1(a, b)
        assert cm.adb == adb(a, b) and cm.hausdorff == hausdorff(a, b)
    assert r.objects.f1 == object_match(gt, pred).f1
    assert r.objects.object_dice == object_dice(gt, pred)
    assert r.objects.object_hausdorff == object_hausdorff(gt, pred)
    assert r.mean["dice"] == math.fsum([dice(gt == 1, pred == 1), dice(gt == 2, pred == 2)]) / 2


def test_report_rates_in_range():
    rng = np.random.default_rng(6)
    for _ in range(20):
        gt = rng.integers(0, 3, size=(10, 10))
        pred = rng.integers(0, 3, size=(10, 10))
        d = evaluate(gt, pred, 2).to_dict()
        for cm in d["per_class"].values():
            assert all(0.0 <= cm[f] <= 1.0 for f in ("dice", "iou", "precision", "recall", "f1"))
            assert cm["adb"] >= 0 and cm["hausdorff"] >= 0


def test_aggregate_skips_absent_values():
    y = square((8, 8), 1, 1, 3)
    reports = [evaluate(y, y, 1), evaluate(y, np.zeros_like(y), 1)]
    s = aggregate(reports)
    assert s["n_samples"] == 2
    assert s["per_class"]["1"]["dice"] == 0.5
    assert s["per_class"]["1"]["hausdorff"] == 0.0


def test_class_metrics_dataclass():
    cm = class_metrics(mask((2, 2), [(0, 0)]), mask((2, 2), [(0, 0)]))
    assert cm.dice == 1.0 and cm.hausdorff == 0.0
