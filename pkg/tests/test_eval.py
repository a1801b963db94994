import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfbnet.evaluation import COCO_THRESHOLDS, evaluate, voc_ap

from oracles import random_boxes, reference_ap


def random_case(rng, n_images=20, classes=(1, 2, 3)):
    gts, dets = {}, []
    for img in range(n_images):
        m = int(rng.integers(0, 4))
        boxes = random_boxes(rng, m, 64.0, 0.1)
        labels = rng.choice(classes, m)
        gts[img] = (boxes, labels)
        for b, l in zip(boxes, labels):
            if rng.random() < 0.8:
                jitter = rng.normal(0, 3, 4)
                dets.append((img, int(l), round(float(rng.random()), 2), b + jitter))
        for _ in range(int(rng.integers(0, 3))):
            dets.append((img, int(rng.choice(classes)), round(float(rng.random()), 2), random_boxes(rng, 1, 64.0, 0.1)[0]))
    return dets, gts


@pytest.mark.parametrize("mode", ["eleven_point", "all_points"])
def test_perfect_precision_full_recall(mode):
    assert voc_ap([0.5, 1.0], [1.0, 1.0], mode) == pytest.approx(1.0)


def test_single_correct_detection():
    res = evaluate([(0, 1, 0.9, [0, 0, 10, 10])], {0: (np.array([[0, 0, 10, 10]]), np.array([1]))})
    assert res.ap[1] == pytest.approx(1.0) and res.map == pytest.approx(1.0)


def test_empty_input_warns():
    with pytest.warns(RuntimeWarning):
        assert voc_ap([], []) == 0.0


def test_duplicate_is_false_positive():
    gts = {0: (np.array([[0, 0, 10, 10]]), np.array([1]))}
    res = evaluate([(0, 1, 0.9, [0, 0, 10, 10]), (0, 1, 0.8, [0, 0, 10, 10])], gts)
    assert res.tp[1] == 1 and res.fp[1] == 1


def test_iou_just_below_threshold_is_fp():
    gts = {0: (np.array([[0.0, 0, 100, 100]]), np.array([1]))}
    det = [0, 0, 100, 49]  # IoU 0.49
    assert evaluate([(0, 1, 0.9, det)], gts).tp[1] == 0
    assert evaluate([(0, 1, 0.9, [0, 0, 100, 50])], gts).tp[1] == 1


def test_difficult_ignored():
    gts = {0: (np.array([[0, 0, 10, 10], [20, 20, 30, 30]]), np.array([1, 1]), np.array([False, True]))}
    res = evaluate([(0, 1, 0.9, [0, 0, 10, 10]), (0, 1, 0.8, [20, 20, 30, 30])], gts)
    assert res.n_gt[1] == 1 and res.fp[1] == 0 and res.ap[1] == pytest.approx(1.0)


def test_classes_without_gt_excluded():
    gts = {0: (np.array([[0, 0, 10, 10]]), np.array([1]))}
    res = evaluate([(0, 2, 0.9, [0, 0, 10, 10])], gts, classes=[1, 2, 3])
    assert set(res.ap) == {1} and res.map == 0.0


def test_no_detections_zero_map():
    gts = {0: (np.array([[0, 0, 10, 10]]), np.array([1]))}
    assert evaluate([], gts).map == 0.0


@pytest.mark.parametrize("mode", ["eleven_point", "all_points"])
@pytest.mark.parametrize("seed", range(10))
def test_matches_reference(seed, mode):
    rng = np.random.default_rng(seed)
    dets, gts = random_case(rng)
    res = evaluate(dets, gts, (0.5,), mode)
    for c, ap in res.ap.items():
        assert ap == pytest.approx(reference_ap(dets, gts, c, 0.5, mode), abs=1e-9)


def test_multi_threshold_average(rng):
    dets, gts = random_case(rng)
    res = evaluate(dets, gts, COCO_THRESHOLDS, "all_points")
    for c, ap in res.ap.items():
        ref = np.mean([reference_ap(dets, gts, c, t, "all_points") for t in COCO_THRESHOLDS])
        assert ap == pytest.approx(ref, abs=1e-9)
    assert len(COCO_THRESHOLDS) == 10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_zero_iou_false_detection_never_helps(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_case(rng, 6)
    base = evaluate(dets, gts)
    worse = evaluate(dets + [(0, 1, float(rng.random()), [200, 200, 210, 210])], gts)
    for c in base.ap:
        assert worse.ap.get(c, 0.0) <= base.ap[c] + 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_equal_score_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_case(rng, 8)
    dets = [(i, l, round(s, 1), b) for i, l, s, b in dets]  # many ties
    perm = [dets[k] for k in rng.permutation(len(dets))]
    a, b = evaluate(dets, gts), evaluate(perm, gts)
    for c in a.ap:
        assert abs(a.ap[c] - b.ap[c]) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(prec=st.lists(st.floats(0, 1), min_size=1, max_size=20), data=st.data())
def test_all_points_bounded(prec, data):
    rec = np.sort(data.draw(st.lists(st.floats(0, 1), min_size=len(prec), max_size=len(prec))))
    ap = voc_ap(rec, prec, "all_points")
    assert 0.0 <= ap <= 1.0 + 1e-12


def test_result_json():
    res = evaluate([(0, 1, 0.9, [0, 0, 10, 10])], {0: (np.array([[0, 0, 10, 10]]), np.array([1]))})
    d = json.loads(res.to_json())
    assert d["map"] == 1.0 and d["ap"] == {"1": 1.0} and d["mode"] == "eleven_point"


def test_unknown_mode():
    with pytest.raises(ValueError):
        voc_ap([1.0], [1.0], "coco")
