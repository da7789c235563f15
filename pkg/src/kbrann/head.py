"""Anchor grid, target assignment, delta coding, multi-task loss, NMS, decoding.

Boxes are (cx, cy, w, h) in image-normalized coordinates throughout. Anchors
are indexed (j, i, k) = (row, column, shape) and flattened row-major, so the
flat index of anchor (j, i, k) is (j * gw + i) * K + k.

The raw head tensor has K * (5 + C) channels; channel k * (5 + C) + f holds
field f of anchor shape k, with fields [dx, dy, dw, dh, conf_logit, class logits...].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ConvKernel, ShapeError, Tensor, apply_op, conv2d

log = logging.getLogger(__name__)

# IoUs closer than this count as tied; ties go to the lowest index
IOU_TIE_TOL = 1e-12

DEFAULT_ANCHOR_SHAPES: tuple[tuple[float, float], ...] = (
    (0.04, 0.04), (0.08, 0.08), (0.06, 0.12), (0.12, 0.06), (0.16, 0.16),
)


@dataclass(frozen=True)
class GroundTruthBox:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive: {self}")

    def box(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass(frozen=True)
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int
    score: float

    def box(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass(frozen=True)
class LossWeights:
    lambda_bbox: float = 5.0
    lambda_conf_pos: float = 75.0
    lambda_conf_neg: float = 100.0

    def __post_init__(self):
        if min(self.lambda_bbox, self.lambda_conf_pos, self.lambda_conf_neg) <= 0:
            raise ValueError(f"loss weights must be positive: {self}")


@dataclass(frozen=True)
class AnchorGrid:
    gw: int
    gh: int
    shapes: tuple[tuple[float, float], ...] = DEFAULT_ANCHOR_SHAPES

    def __post_init__(self):
        if self.gw < 1 or self.gh < 1 or not self.shapes:
            raise ValueError("anchor grid needs gw, gh >= 1 and at least one shape")
        if any(w <= 0 or h <= 0 for w, h in self.shapes):
            raise ValueError("anchor shapes must be positive")

    @property
    def K(self) -> int:
        return len(self.shapes)

    def __len__(self) -> int:
        return self.gw * self.gh * self.K

    def boxes(self) -> np.ndarray:
        """All anchors as a (gh, gw, K, 4) array."""
        xs = (np.arange(self.gw) + 0.5) / self.gw
        ys = (np.arange(self.gh) + 0.5) / self.gh
        out = np.empty((self.gh, self.gw, self.K, 4))
        out[..., 0] = xs[None, :, None]
        out[..., 1] = ys[:, None, None]
        out[..., 2] = np.array([s[0] for s in self.shapes])
        out[..., 3] = np.array([s[1] for s in self.shapes])
        return out

    def flat_boxes(self) -> np.ndarray:
        return self.boxes().reshape(-1, 4)

    def unflatten(self, flat: int) -> tuple[int, int, int]:
        jk, k = divmod(flat, self.K)
        j, i = divmod(jk, self.gw)
        return j, i, k


# --------------------------------------------------------------------------
# box geometry


def to_corners(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.stack([b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
                     b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (m, 4) and (n, 4) center-format boxes."""
    ca, cb = to_corners(np.reshape(a, (-1, 4))), to_corners(np.reshape(b, (-1, 4)))
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    inter = np.prod(np.clip(rb - lt, 0.0, None), axis=-1)
    area_a = np.prod(ca[:, 2:] - ca[:, :2], axis=-1)
    area_b = np.prod(cb[:, 2:] - cb[:, :2], axis=-1)
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def iou_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU between two (m, 4) arrays."""
    ca, cb = to_corners(a), to_corners(b)
    wh = np.clip(np.minimum(ca[:, 2:], cb[:, 2:]) - np.maximum(ca[:, :2], cb[:, :2]), 0.0, None)
    inter = wh[:, 0] * wh[:, 1]
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return inter / union


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    return float(iou_matrix(np.asarray(a), np.asarray(b))[0, 0])


def encode_gt(gt, anchor) -> np.ndarray:
    """Deltas (dx, dy, dw, dh) of box ``gt`` relative to ``anchor``; works row-wise."""
    g = gt.box() if isinstance(gt, GroundTruthBox) else np.asarray(gt, dtype=np.float64)
    a = np.asarray(anchor, dtype=np.float64)
    if np.any(g[..., 2:] <= 0):
        raise ValueError("ground-truth extents must be positive")
    if np.any(a[..., 2:] <= 0):
        raise ValueError("anchor extents must be positive")
    return np.stack([(g[..., 0] - a[..., 0]) / a[..., 2], (g[..., 1] - a[..., 1]) / a[..., 3],
                     np.log(g[..., 2] / a[..., 2]), np.log(g[..., 3] / a[..., 3])], axis=-1)


def decode(deltas, anchor) -> np.ndarray:
    d = np.asarray(deltas, dtype=np.float64)
    a = np.asarray(anchor, dtype=np.float64)
    return np.stack([a[..., 0] + d[..., 0] * a[..., 2], a[..., 1] + d[..., 1] * a[..., 3],
                     a[..., 2] * np.exp(d[..., 2]), a[..., 3] * np.exp(d[..., 3])], axis=-1)


# --------------------------------------------------------------------------
# assignment


@dataclass
class Assignment:
    """Positive anchors for a batch. ``pos`` rows are (batch, j, i, k)."""

    indicator: np.ndarray
    pos: np.ndarray
    gt_index: np.ndarray
    target_deltas: np.ndarray
    target_class: np.ndarray
    gt_boxes: np.ndarray
    anchor_boxes: np.ndarray
    dropped: int = 0

    @property
    def n_obj(self) -> int:
        return len(self.pos)

    @property
    def negatives(self) -> np.ndarray:
        return ~self.indicator

    @classmethod
    def stack(cls, items: Sequence["Assignment"]) -> "Assignment":
        pos = []
        for b, a in enumerate(items):
            p = a.pos.copy()
            p[:, 0] = b
            pos.append(p)
        return cls(
            indicator=np.concatenate([a.indicator for a in items], axis=0),
            pos=np.concatenate(pos, axis=0).reshape(-1, 4),
            gt_index=np.concatenate([a.gt_index for a in items]),
            target_deltas=np.concatenate([a.target_deltas for a in items]).reshape(-1, 4),
            target_class=np.concatenate([a.target_class for a in items]),
            gt_boxes=np.concatenate([a.gt_boxes for a in items]).reshape(-1, 4),
            anchor_boxes=np.concatenate([a.anchor_boxes for a in items]).reshape(-1, 4),
            dropped=sum(a.dropped for a in items),
        )


def best_index(values: np.ndarray) -> int:
    """Position of the maximum, preferring the lowest position among near-ties."""
    return int(np.argmax(values >= values.max() - IOU_TIE_TOL))


def assign_anchors(gts: Sequence[GroundTruthBox], grid: AnchorGrid) -> Assignment:
    """Give each ground truth its max-IoU anchor, in list order.

    A GT whose best anchor is already taken falls back to its next best;
    ties go to the lowest flat index.
    """
    anchors = grid.flat_boxes()
    indicator = np.zeros((1, grid.gh, grid.gw, grid.K), dtype=bool)
    taken = np.zeros(len(anchors), dtype=bool)
    rows, gt_idx = [], []
    dropped = 0
    if gts:
        ious = iou_matrix(np.stack([g.box() for g in gts]), anchors)
        for g, row in enumerate(ious):
            free = np.flatnonzero(~taken)
            if len(free) == 0:
                dropped += 1
                continue
            a = int(free[best_index(row[free])])
            taken[a] = True
            rows.append(a)
            gt_idx.append(g)
    if dropped:
        log.warning("%d ground-truth boxes dropped: no free anchors", dropped)

    pos = np.array([(0, *grid.unflatten(a)) for a in rows], dtype=np.int64).reshape(-1, 4)
    indicator[0, pos[:, 1], pos[:, 2], pos[:, 3]] = True
    gt_boxes = np.array([gts[g].box() for g in gt_idx]).reshape(-1, 4)
    anchor_boxes = anchors[rows].reshape(-1, 4)
    deltas = encode_gt(gt_boxes, anchor_boxes) if rows else np.zeros((0, 4))
    return Assignment(
        indicator=indicator,
        pos=pos,
        gt_index=np.array(gt_idx, dtype=np.int64),
        target_deltas=deltas,
        target_class=np.array([gts[g].class_id for g in gt_idx], dtype=np.int64),
        gt_boxes=gt_boxes,
        anchor_boxes=anchor_boxes,
        dropped=dropped,
    )


# --------------------------------------------------------------------------
# head output and loss


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _anchor_layout(raw: np.ndarray, num_classes: int) -> np.ndarray:
    n, ch, gh, gw = raw.shape
    f = 5 + num_classes
    if ch % f:
        raise ShapeError(f"head has {ch} channels, not a multiple of 5 + {num_classes}")
    return raw.reshape(n, ch // f, f, gh, gw).transpose(0, 3, 4, 1, 2)


@dataclass
class HeadOutput:
    """Per-anchor predictions, each array indexed (n, gh, gw, K, ...)."""

    deltas: np.ndarray
    confidence: np.ndarray
    class_probs: np.ndarray

    @classmethod
    def from_raw(cls, raw: np.ndarray | Tensor, num_classes: int) -> "HeadOutput":
        r = _anchor_layout(raw.data if isinstance(raw, Tensor) else raw, num_classes)
        return cls(r[..., :4].copy(), _sigmoid(r[..., 4]), _softmax(r[..., 5:]))


def confidence_targets(raw: np.ndarray | Tensor, asg: Assignment, num_classes: int) -> np.ndarray:
    """IoU of each positive anchor's decoded prediction with its matched GT."""
    r = _anchor_layout(raw.data if isinstance(raw, Tensor) else raw, num_classes)
    if asg.n_obj == 0:
        return np.zeros(0)
    b, j, i, k = asg.pos.T
    return iou_pairs(decode(r[b, j, i, k, :4], asg.anchor_boxes), asg.gt_boxes)


def _loss_and_grad(raw: np.ndarray, asg: Assignment, w: LossWeights, num_classes: int,
                   conf_target: np.ndarray | None):
    r = _anchor_layout(raw, num_classes)
    n, gh, gw, K = r.shape[:4]
    if asg.indicator.shape != (n, gh, gw, K):
        raise ShapeError(f"assignment grid {asg.indicator.shape} != head grid {(n, gh, gw, K)}")
    grad = np.zeros_like(r)
    gamma = _sigmoid(r[..., 4])
    dgamma = gamma * (1.0 - gamma)
    n_pos = asg.n_obj
    n_neg = n * gh * gw * K - n_pos
    terms = {"bbox": 0.0, "conf_pos": 0.0, "conf_neg": 0.0, "class": 0.0}

    if n_pos:
        b, j, i, k = asg.pos.T
        rp = r[b, j, i, k]
        diff = rp[:, :4] - asg.target_deltas
        terms["bbox"] = w.lambda_bbox / n_pos * float((diff ** 2).sum())
        grad[b, j, i, k, :4] = 2.0 * w.lambda_bbox / n_pos * diff

        if conf_target is None:
            conf_target = confidence_targets(raw, asg, num_classes)
        gp = gamma[b, j, i, k]
        terms["conf_pos"] = w.lambda_conf_pos / n_pos * float(((gp - conf_target) ** 2).sum())
        grad[b, j, i, k, 4] = 2.0 * w.lambda_conf_pos / n_pos * (gp - conf_target) * dgamma[b, j, i, k]

        logits = rp[:, 5:]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        rows = np.arange(n_pos)
        terms["class"] = -float(log_p[rows, asg.target_class].sum()) / n_pos
        dlog = np.exp(log_p)
        dlog[rows, asg.target_class] -= 1.0
        grad[b, j, i, k, 5:] = dlog / n_pos

    if n_neg:
        neg = asg.negatives
        terms["conf_neg"] = w.lambda_conf_neg / n_neg * float((gamma[neg] ** 2).sum())
        grad[..., 4] += np.where(neg, 2.0 * w.lambda_conf_neg / n_neg * gamma * dgamma, 0.0)

    grad_raw = grad.transpose(0, 3, 4, 1, 2).reshape(raw.shape)
    return terms, grad_raw


def loss_terms(head: Tensor, asg: Assignment, num_classes: int,
               weights: LossWeights = LossWeights(),
               conf_target: np.ndarray | None = None) -> dict[str, float]:
    return _loss_and_grad(head.data, asg, weights, num_classes, conf_target)[0]


def multitask_loss(head: Tensor, asg: Assignment, num_classes: int,
                   weights: LossWeights = LossWeights(),
                   conf_target: np.ndarray | None = None) -> Tensor:
    """Box regression + confidence regression + cross-entropy, as a scalar tensor.

    The confidence target of a positive anchor is the IoU of its decoded box
    with the matched GT, computed from the current prediction and held
    constant (``conf_target`` overrides it). With no positives, the positive
    terms are 0; with no negatives, the negative term is 0.
    """
    terms, grad = _loss_and_grad(head.data, asg, weights, num_classes, conf_target)
    value = np.full((1, 1, 1, 1), sum(terms.values()))
    return apply_op("multitask_loss", [head], value, lambda g: [grad * g.reshape(())])


# --------------------------------------------------------------------------
# inference


def nms(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy same-class suppression; ties in score keep input order."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    if not dets:
        return []
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    boxes = np.stack([d.box() for d in dets])
    classes = np.array([d.class_id for d in dets])
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(dets), dtype=bool)
    keep = []
    for a in order:
        if suppressed[a]:
            continue
        keep.append(dets[a])
        suppressed |= (classes == classes[a]) & (ious[a] > iou_thresh)
    return keep


def detections_from_head(raw: np.ndarray, grid: AnchorGrid, num_classes: int,
                         conf_thresh: float, iou_thresh: float,
                         max_candidates: int = 300) -> list[list[Detection]]:
    out = HeadOutput.from_raw(raw, num_classes)
    boxes = decode(out.deltas, grid.boxes()[None])
    cls = out.class_probs.argmax(axis=-1)
    score = out.confidence * out.class_probs.max(axis=-1)
    results = []
    for b in range(raw.shape[0]):
        s = score[b].reshape(-1)
        idx = np.flatnonzero(s >= conf_thresh)
        idx = idx[np.argsort(-s[idx], kind="stable")][:max_candidates]
        bb = boxes[b].reshape(-1, 4)
        cc = cls[b].reshape(-1)
        dets = [Detection(*map(float, bb[a]), int(cc[a]), float(s[a])) for a in idx]
        results.append(nms(dets, iou_thresh))
    return results


def head_forward(features: Tensor, head: ConvKernel, grid: AnchorGrid, num_classes: int) -> Tensor:
    if (features.shape.h, features.shape.w) != (grid.gh, grid.gw):
        raise ShapeError(f"features {features.shape.h}x{features.shape.w} != grid {grid.gh}x{grid.gw}")
    if head.out_channels != grid.K * (5 + num_classes):
        raise ShapeError(f"head has {head.out_channels} outputs, expected {grid.K * (5 + num_classes)}")
    return conv2d(features, head)


def predict(features: Tensor, grid: AnchorGrid, head: ConvKernel, num_classes: int,
            conf_thresh: float = 0.6, iou_thresh: float = 0.4) -> list[Detection]:
    """Detections for a single-image feature map."""
    if features.shape.n != 1:
        raise ShapeError("predict takes one image; use detections_from_head for batches")
    raw = head_forward(features, head, grid, num_classes)
    return detections_from_head(raw.data, grid, num_classes, conf_thresh, iou_thresh)[0]


def detections_to_json(dets: Sequence[Detection]) -> str:
    rows = [
        '{"cx": %.6f, "cy": %.6f, "w": %.6f, "h": %.6f, "class": %d, "score": %.6f}'
        % (d.cx, d.cy, d.w, d.h, d.class_id, d.score)
        for d in dets
    ]
    return "[" + ",\n ".join(rows) + "]\n"
