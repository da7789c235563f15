"""Per-class average precision (all-point interpolation) and mAP."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .head import Detection, GroundTruthBox, best_index, iou_matrix


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    conf_thresh: float = 0.01
    nms_iou: float = 0.4
    per_class: bool = True

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"iou_threshold must be in (0, 1), got {self.iou_threshold}")


@dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                     iou_thresh: float) -> list[tuple[Detection, bool]]:
    """Greedy matching of score-sorted detections to ground truths of one image.

    Each detection takes the highest-IoU still-unmatched GT of its class with
    IoU >= ``iou_thresh`` (true positive), otherwise it is a false positive.
    """
    if not dets:
        return []
    if not gts:
        return [(d, False) for d in dets]
    ious = iou_matrix(np.stack([d.box() for d in dets]), np.stack([g.box() for g in gts]))
    gt_cls = np.array([g.class_id for g in gts])
    used = np.zeros(len(gts), dtype=bool)
    out = []
    for r, d in enumerate(dets):
        cand = np.where((gt_cls == d.class_id) & ~used & (ious[r] >= iou_thresh), ious[r], -1.0)
        best = best_index(cand)
        if cand[best] >= 0.0:
            used[best] = True
            out.append((d, True))
        else:
            out.append((d, False))
    return out


def pr_curve(tp_flags: Sequence[bool], n_gt: int) -> list[PRPoint]:
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(tp_flags, dtype=np.float64))
    if n_gt == 0 or len(tp) == 0:
        return []
    return [PRPoint(float(t / n_gt), float(t / (t + f))) for t, f in zip(tp, fp)]


def average_precision(matched: Sequence[bool] | Sequence[tuple[Detection, bool]], n_gt: int) -> float:
    """Area under the monotone precision envelope. ``matched`` is in score order."""
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    flags = [m[1] if isinstance(m, tuple) else bool(m) for m in matched]
    curve = pr_curve(flags, n_gt)
    if not curve:
        return 0.0
    recall = np.array([0.0] + [p.recall for p in curve])
    precision = np.array([p.precision for p in curve])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(np.diff(recall) * envelope))


def mean_ap(per_class_ap: Mapping[int, float]) -> float:
    """Mean over the given classes; pass only classes that have ground truth."""
    if not per_class_ap:
        raise ValueError("no class has ground truth; mAP is undefined")
    return float(np.mean(list(per_class_ap.values())))


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    mAP: float
    n_images: int
    n_gt: dict[int, int]
    n_det: dict[int, int]
    config: EvalConfig

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "counts": {
                "images": self.n_images,
                "ground_truth": {str(k): v for k, v in sorted(self.n_gt.items())},
                "detections": {str(k): v for k, v in sorted(self.n_det.items())},
            },
            "config": asdict(self.config),
        }


def evaluate_detections(dets_per_image: Sequence[Sequence[Detection]],
                        gts_per_image: Sequence[Sequence[GroundTruthBox]],
                        cfg: EvalConfig = EvalConfig()) -> EvalReport:
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truth cover different image counts")
    n_gt: dict[int, int] = {}
    for gts in gts_per_image:
        for g in gts:
            n_gt[g.class_id] = n_gt.get(g.class_id, 0) + 1
    ranked: dict[int, list] = {}
    for img, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        for pos, (d, hit) in zip(order, match_detections([dets[i] for i in order], gts,
                                                          cfg.iou_threshold)):
            ranked.setdefault(d.class_id, []).append((-d.score, img, pos, hit))
    n_det = {c: len(r) for c, r in ranked.items()}
    per_class: dict[int, float] = {}
    for c in sorted(n_gt):
        # stable on (score, image, position) so ties keep input order
        rows = sorted(ranked.get(c, []), key=lambda r: r[:3])
        per_class[c] = average_precision([r[3] for r in rows], n_gt[c])
    return EvalReport(per_class, mean_ap(per_class), len(gts_per_image), n_gt, n_det, cfg)
