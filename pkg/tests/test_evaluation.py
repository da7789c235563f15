import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kbrann.evaluation import (
    EvalConfig,
    average_precision,
    evaluate_detections,
    match_detections,
    mean_ap,
    pr_curve,
)
from kbrann.head import Detection, GroundTruthBox
from oracles import match_reference, random_box


def ap_reference(flags, n_gt):
    """All-point AP: at each TP rank, the best precision at any rank at or beyond it."""
    if n_gt == 0:
        return 0.0
    prec = []
    tp = 0
    for r, f in enumerate(flags, start=1):
        tp += f
        prec.append(tp / r)
    total = 0.0
    for r, f in enumerate(flags):
        if f:
            total += max(prec[r:]) / n_gt
    return total


def test_hand_case():
    assert average_precision([True, False, True], 2) == pytest.approx(5 / 6, abs=1e-12)


def test_pr_curve_points():
    pts = pr_curve([True, False, True], 2)
    assert [(p.recall, p.precision) for p in pts] == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), max_size=30), st.integers(0, 10))
def test_ap_matches_reference(flags, extra):
    n_gt = sum(flags) + extra
    assert average_precision(flags, n_gt) == pytest.approx(ap_reference(flags, n_gt), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), max_size=30), st.integers(0, 10))
def test_ap_is_a_fraction(flags, extra):
    n_gt = sum(flags) + extra
    ap = average_precision(flags, n_gt)
    assert 0.0 <= ap <= 1.0
    if n_gt and all(flags[:n_gt]) and len(flags) >= n_gt:
        assert ap == pytest.approx(1.0)


def test_mean_ap_small_cases():
    assert mean_ap({0: 0.7}) == 0.7
    assert mean_ap({0: 1.0, 1: 0.0}) == 0.5


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=25), st.integers(0, 5), st.data())
def test_turning_a_false_positive_into_a_hit_never_lowers_ap(flags, extra, data):
    n_gt = sum(flags) + extra + 1
    misses = [r for r, f in enumerate(flags) if not f]
    if not misses:
        return
    r = data.draw(st.sampled_from(misses))
    better = flags[:r] + [True] + flags[r + 1:]
    assert average_precision(better, n_gt) >= average_precision(flags, n_gt) - 1e-15


def test_edge_cases():
    assert average_precision([], 3) == 0.0
    assert average_precision([False, False], 0) == 0.0
    with pytest.raises(ValueError):
        mean_ap({})
    with pytest.raises(ValueError):
        EvalConfig(iou_threshold=1.0)


def test_matching_follows_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(300):
        gts = [GroundTruthBox(*random_box(rng, 0.05, 0.4), int(rng.integers(2)))
               for _ in range(rng.integers(0, 21))]
        dets = []
        for _ in range(rng.integers(0, 21)):
            if gts and rng.random() < 0.6:
                g = gts[rng.integers(len(gts))]
                box = np.clip(g.box() + rng.normal(scale=0.02, size=4), 0.01, None)
                dets.append(Detection(*map(float, box), g.class_id, float(rng.random())))
            else:
                dets.append(Detection(*random_box(rng, 0.05, 0.4), int(rng.integers(2)), float(rng.random())))
        thresh = float(rng.uniform(0.2, 0.8))
        got = [hit for _, hit in match_detections(dets, gts, thresh)]
        assert got == match_reference(dets, gts, thresh)


def test_one_detection_per_ground_truth():
    g = GroundTruthBox(0.5, 0.5, 0.2, 0.2, 0)
    d = Detection(0.5, 0.5, 0.2, 0.2, 0, 0.9)
    assert [h for _, h in match_detections([d, d], [g], 0.5)] == [True, False]


def test_ground_truth_as_detections_scores_one():
    rng = np.random.default_rng(3)
    gts = [[GroundTruthBox(*random_box(rng), int(rng.integers(3))) for _ in range(4)] for _ in range(5)]
    dets = [[Detection(g.cx, g.cy, g.w, g.h, g.class_id, 1.0) for g in img] for img in gts]
    report = evaluate_detections(dets, gts)
    assert report.mAP == pytest.approx(1.0)


def test_global_ranking_across_images():
    gts = [[GroundTruthBox(0.5, 0.5, 0.2, 0.2, 0)], [GroundTruthBox(0.3, 0.3, 0.2, 0.2, 0)]]
    dets = [
        [Detection(0.9, 0.9, 0.1, 0.1, 0, 0.95), Detection(0.5, 0.5, 0.2, 0.2, 0, 0.9)],
        [Detection(0.3, 0.3, 0.2, 0.2, 0, 0.8)],
    ]
    # global order: FP (0.95), TP (0.9), TP (0.8) -> precision envelope 2/3 on both recall steps
    report = evaluate_detections(dets, gts, EvalConfig())
    assert report.per_class_ap[0] == pytest.approx(2 / 3)


def test_report_counts_and_config_echo():
    gts = [[GroundTruthBox(0.5, 0.5, 0.2, 0.2, 0), GroundTruthBox(0.2, 0.2, 0.1, 0.1, 1)]]
    dets = [[Detection(0.5, 0.5, 0.2, 0.2, 0, 0.9)]]
    cfg = EvalConfig(iou_threshold=0.7)
    d = evaluate_detections(dets, gts, cfg).to_dict()
    assert d["per_class_ap"] == {"0": 1.0, "1": 0.0}
    assert d["mAP"] == pytest.approx(0.5)
    assert d["counts"] == {"images": 1, "ground_truth": {"0": 1, "1": 1}, "detections": {"0": 1}}
    assert d["config"]["iou_threshold"] == 0.7


def test_mismatched_image_counts():
    with pytest.raises(ValueError):
        evaluate_detections([[]], [[], []])
