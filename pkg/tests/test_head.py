import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import max_grad_error, relative_error
from kbrann.head import (
    AnchorGrid,
    Assignment,
    Detection,
    GroundTruthBox,
    HeadOutput,
    LossWeights,
    assign_anchors,
    confidence_targets,
    decode,
    detections_from_head,
    detections_to_json,
    encode_gt,
    iou,
    iou_matrix,
    iou_pairs,
    loss_terms,
    multitask_loss,
    nms,
)
from kbrann.tensor import Tape, Tensor
from oracles import (
    assign_reference,
    loss_reference,
    nms_reference,
    perfect_head,
    random_box,
    random_grid,
    scalar_iou,
)

box_strategy = st.tuples(st.floats(-1, 2), st.floats(-1, 2), st.floats(1e-3, 3), st.floats(1e-3, 3))


@settings(max_examples=200, deadline=None)
@given(box_strategy, box_strategy)
def test_encode_decode_round_trip(box, anchor):
    back = decode(encode_gt(box, anchor), anchor)
    np.testing.assert_allclose(back, box, rtol=0, atol=1e-9)


def test_encode_rejects_degenerate_boxes():
    with pytest.raises(ValueError):
        encode_gt((0.5, 0.5, 0.0, 0.1), (0.5, 0.5, 0.1, 0.1))
    with pytest.raises(ValueError):
        encode_gt((0.5, 0.5, 0.1, 0.1), (0.5, 0.5, 0.1, -0.1))
    with pytest.raises(ValueError):
        GroundTruthBox(0.5, 0.5, 0.0, 0.2, 0)


def test_iou_hand_values():
    assert iou((0.5, 0.5, 0.2, 0.2), (0.5, 0.5, 0.2, 0.2)) == pytest.approx(1.0)
    assert iou((0.2, 0.2, 0.1, 0.1), (0.8, 0.8, 0.1, 0.1)) == 0.0
    # half overlap along x: inter 0.5, union 1.5
    assert iou((0.0, 0.0, 1.0, 1.0), (0.5, 0.0, 1.0, 1.0)) == pytest.approx(1 / 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_iou_vectorized_forms_agree_with_scalar(seed):
    rng = np.random.default_rng(seed)
    a = np.array([random_box(rng) for _ in range(4)])
    b = np.array([random_box(rng) for _ in range(4)])
    m = iou_matrix(a, b)
    for r in range(4):
        for c in range(4):
            assert m[r, c] == pytest.approx(scalar_iou(a[r], b[c]), abs=1e-14)
    np.testing.assert_allclose(iou_pairs(a, b), np.diag(m), atol=1e-14)
    assert np.all((m >= 0) & (m <= 1))


def test_anchor_flat_index_layout():
    grid = AnchorGrid(3, 2, ((0.1, 0.1), (0.2, 0.3)))
    flat = grid.flat_boxes()
    for j in range(2):
        for i in range(3):
            for k in range(2):
                a = (j * 3 + i) * 2 + k
                assert grid.unflatten(a) == (j, i, k)
                np.testing.assert_allclose(flat[a], [(i + 0.5) / 3, (j + 0.5) / 2, *grid.shapes[k]])


def test_assignment_follows_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        grid = random_grid(rng)
        gts = [GroundTruthBox(*random_box(rng), int(rng.integers(3))) for _ in range(rng.integers(0, 21))]
        asg = assign_anchors(gts, grid)
        ref = assign_reference(gts, grid)
        got = [(int(g), *map(int, p[1:])) for g, p in zip(asg.gt_index, asg.pos)]
        assert got == ref
        assert asg.indicator.sum() == asg.n_obj == len(ref)
        assert asg.dropped == len(gts) - len(ref)


def test_assignment_targets_encode_matched_gt():
    grid = AnchorGrid(4, 4)
    gts = [GroundTruthBox(0.3, 0.7, 0.05, 0.06, 2), GroundTruthBox(0.8, 0.2, 0.15, 0.15, 0)]
    asg = assign_anchors(gts, grid)
    np.testing.assert_allclose(decode(asg.target_deltas, asg.anchor_boxes), [g.box() for g in gts])
    assert list(asg.target_class) == [2, 0]


def test_stacked_assignment_reindexes_batch():
    grid = AnchorGrid(2, 2)
    a = assign_anchors([GroundTruthBox(0.3, 0.3, 0.1, 0.1, 0)], grid)
    b = assign_anchors([GroundTruthBox(0.7, 0.7, 0.1, 0.1, 1), GroundTruthBox(0.2, 0.8, 0.1, 0.1, 2)], grid)
    s = Assignment.stack([a, b, assign_anchors([], grid)])
    assert s.indicator.shape == (3, 2, 2, grid.K)
    assert list(s.pos[:, 0]) == [0, 1, 1]
    assert s.n_obj == 3


def test_perfect_prediction_has_zero_loss():
    grid = AnchorGrid(8, 8)
    gts = [GroundTruthBox(0.21, 0.33, 0.05, 0.07, 0), GroundTruthBox(0.7, 0.6, 0.12, 0.1, 2)]
    raw, asg = perfect_head(grid, 3, gts)
    np.testing.assert_allclose(confidence_targets(raw, asg, 3), 1.0, atol=1e-12)
    assert multitask_loss(Tensor(raw), asg, 3).item() <= 1e-12


def test_default_weights():
    assert LossWeights() == LossWeights(5.0, 75.0, 100.0)
    with pytest.raises(ValueError):
        LossWeights(0.0, 1.0, 1.0)


def test_loss_single_object_by_hand():
    grid = AnchorGrid(2, 2, ((0.5, 0.5),))
    gt = GroundTruthBox(0.3, 0.3, 0.4, 0.4, 1)
    raw = np.random.default_rng(3).normal(size=(1, 7, 2, 2))
    asg = assign_anchors([gt], grid)
    assert tuple(asg.pos[0]) == (0, 0, 0, 0)
    v = raw[0, :, 0, 0]
    anchor = (0.25, 0.25, 0.5, 0.5)
    t = [(0.3 - 0.25) / 0.5, (0.3 - 0.25) / 0.5, np.log(0.8), np.log(0.8)]
    iou_target = scalar_iou(decode(v[:4], anchor), gt.box())
    sig = lambda z: 1 / (1 + np.exp(-z))
    ce = np.log(np.exp(v[5]) + np.exp(v[6])) - v[6]
    neg = sum(sig(raw[0, 4, j, i]) ** 2 for j, i in ((0, 1), (1, 0), (1, 1)))
    expect = (5 * sum((v[q] - t[q]) ** 2 for q in range(4)) + 75 * (sig(v[4]) - iou_target) ** 2 + ce
              + 100 / 3 * neg)
    assert multitask_loss(Tensor(raw), asg, 2).item() == pytest.approx(expect, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_loop_reference(seed):
    rng = np.random.default_rng(seed)
    grid = AnchorGrid(3, 2, ((0.2, 0.2), (0.4, 0.3)))
    C = 3
    images = [[GroundTruthBox(*random_box(rng, 0.1, 0.5), int(rng.integers(C)))
               for _ in range(rng.integers(0, 3))] for _ in range(2)]
    asg = Assignment.stack([assign_anchors(g, grid) for g in images])
    raw = rng.normal(size=(2, grid.K * (5 + C), 2, 3))
    target = rng.uniform(size=asg.n_obj)
    matches = [[] for _ in images]
    for (b, j, i, k), g in zip(asg.pos, asg.gt_index):
        matches[b].append((j, i, k, images[b][g]))
    expect = loss_reference(raw, grid, C, matches, list(target))
    got = multitask_loss(Tensor(raw), asg, C, conf_target=target).item()
    assert got == pytest.approx(expect, rel=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_gradient_against_finite_differences(seed):
    rng = np.random.default_rng(seed)
    grid = AnchorGrid(3, 3, ((0.2, 0.2), (0.3, 0.5)))
    C = 2
    gts = [[GroundTruthBox(*random_box(rng, 0.1, 0.5), int(rng.integers(C))) for _ in range(2)]
           for _ in range(2)]
    asg = Assignment.stack([assign_anchors(g, grid) for g in gts])
    raw = Tensor(rng.normal(size=(2, grid.K * (5 + C), 3, 3)), requires_grad=True)
    target = confidence_targets(raw, asg, C)
    with Tape() as tape:
        loss = multitask_loss(raw, asg, C, conf_target=target)
    tape.backward(loss)
    numeric = np.zeros_like(raw.data)
    eps = 1e-4
    for idx in np.ndindex(raw.data.shape):
        orig = raw.data[idx]
        raw.data[idx] = orig + eps
        up = sum(loss_terms(raw, asg, C, conf_target=target).values())
        raw.data[idx] = orig - eps
        down = sum(loss_terms(raw, asg, C, conf_target=target).values())
        raw.data[idx] = orig
        numeric[idx] = (up - down) / (2 * eps)
    assert relative_error(raw.grad, numeric).max() <= 1e-6


def test_loss_gradient_on_a_single_anchor_grid():
    rng = np.random.default_rng(11)
    grid = AnchorGrid(2, 2, ((0.5, 0.5),))
    asg = assign_anchors([GroundTruthBox(0.3, 0.6, 0.3, 0.4, 1)], grid)
    raw = Tensor(rng.normal(size=(1, 8, 2, 2)), requires_grad=True)
    target = confidence_targets(raw, asg, 3)
    assert max_grad_error(lambda: multitask_loss(raw, asg, 3, conf_target=target), [raw]) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 20.0))
def test_loss_is_non_negative(seed, spread):
    rng = np.random.default_rng(seed)
    grid = AnchorGrid(3, 3)
    gts = [GroundTruthBox(*random_box(rng, 0.05, 0.3), int(rng.integers(2))) for _ in range(rng.integers(0, 4))]
    raw = Tensor(rng.normal(scale=spread, size=(1, grid.K * 7, 3, 3)))
    assert multitask_loss(raw, assign_anchors(gts, grid), 2).item() >= 0.0


def test_loss_without_objects_only_penalizes_confidence():
    grid = AnchorGrid(2, 2)
    asg = assign_anchors([], grid)
    raw = np.zeros((1, grid.K * 8, 2, 2))
    terms = loss_terms(Tensor(raw), asg, 3)
    assert terms["bbox"] == terms["conf_pos"] == terms["class"] == 0.0
    # sigmoid(0)^2 averaged over negatives, times 100
    assert terms["conf_neg"] == pytest.approx(25.0)


def test_nms_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(0, 21))
        dets = [Detection(*random_box(rng, 0.05, 0.4), int(rng.integers(2)),
                          float(rng.choice([0.3, 0.5, 0.9]) if rng.random() < 0.3 else rng.random()))
                for _ in range(n)]
        thresh = float(rng.uniform(0.1, 0.9))
        assert nms(dets, thresh) == nms_reference(dets, thresh)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_nms_ignores_input_order(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 15))
    # distinct scores, so order cannot act as a tie-break
    scores = rng.permutation(n) / n + 0.01
    dets = [Detection(*random_box(rng, 0.05, 0.4), int(rng.integers(2)), float(s)) for s in scores]
    shuffled = [dets[i] for i in rng.permutation(n)]
    assert set(nms(dets, 0.4)) == set(nms(shuffled, 0.4))


def test_nms_keeps_other_classes():
    a = Detection(0.5, 0.5, 0.2, 0.2, 0, 0.9)
    b = Detection(0.51, 0.5, 0.2, 0.2, 0, 0.8)
    c = Detection(0.51, 0.5, 0.2, 0.2, 1, 0.7)
    assert nms([a, b, c], 0.4) == [a, c]
    with pytest.raises(ValueError):
        nms([a], 1.5)


def test_decoding_a_perfect_head_recovers_boxes():
    grid = AnchorGrid(8, 8)
    gts = [GroundTruthBox(0.21, 0.33, 0.05, 0.07, 0), GroundTruthBox(0.7, 0.6, 0.12, 0.1, 2)]
    raw, _ = perfect_head(grid, 3, gts)
    dets = detections_from_head(raw, grid, 3, conf_thresh=0.6, iou_thresh=0.4)[0]
    assert len(dets) == 2
    for d, g in zip(sorted(dets, key=lambda d: d.class_id), gts):
        assert d.class_id == g.class_id and d.score == pytest.approx(1.0)
        np.testing.assert_allclose(d.box(), g.box(), atol=1e-12)


def test_detections_re_encode_to_raw_outputs():
    rng = np.random.default_rng(8)
    grid = AnchorGrid(4, 3)
    raw = rng.normal(scale=0.5, size=(1, grid.K * 7, 3, 4))
    dets = detections_from_head(raw, grid, 2, conf_thresh=0.0, iou_thresh=0.9, max_candidates=len(grid))[0]
    assert len(dets) > len(grid) // 2
    out = HeadOutput.from_raw(raw, 2)
    scores = (out.confidence * out.class_probs.max(axis=-1)).reshape(-1)
    deltas = out.deltas.reshape(-1, 4)
    anchors = grid.flat_boxes()
    for d in dets:
        a = int(np.flatnonzero(scores == d.score)[0])
        np.testing.assert_allclose(encode_gt(d.box(), anchors[a]), deltas[a], atol=1e-12)


def test_detection_json_format():
    text = detections_to_json([Detection(0.1234567, 0.5, 0.25, 0.125, 1, 0.987654321)])
    rows = json.loads(text)
    assert rows == [{"cx": 0.123457, "cy": 0.5, "w": 0.25, "h": 0.125, "class": 1, "score": 0.987654}]
    assert '"cx": 0.123457' in text and '"cy": 0.500000' in text
    assert json.loads(detections_to_json([])) == []
