"""VOC-style average precision.

Detections are matched greedily per class in descending score order
(equal scores: lower original index first).  A detection is a true positive
when its best-overlapping ground truth of the same class reaches the IoU
threshold (>=) and has not been claimed yet; anything else is a false
positive.  Detections matched to a ``difficult`` ground truth are ignored.

The precision/recall curve is sampled once per distinct score, so the AP
does not depend on how equal-score detections are ordered.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .detector import iou_matrix


@dataclass
class EvalResult:
    ap: dict[int, float]
    map: float
    precision: dict[int, list[float]] = field(default_factory=dict)
    recall: dict[int, list[float]] = field(default_factory=dict)
    tp: dict[int, int] = field(default_factory=dict)
    fp: dict[int, int] = field(default_factory=dict)
    n_gt: dict[int, int] = field(default_factory=dict)
    iou_thresholds: tuple[float, ...] = (0.5,)
    mode: str = "eleven_point"

    def to_json(self) -> str:
        d = asdict(self)
        for key in ("ap", "precision", "recall", "tp", "fp", "n_gt"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return json.dumps(d, indent=2, sort_keys=True)


def voc_ap(recall, precision, mode: str = "eleven_point") -> float:
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    if recall.shape != precision.shape:
        raise ValueError("recall and precision must have the same shape")
    if recall.size == 0:
        warnings.warn("voc_ap: empty precision/recall; AP is 0", RuntimeWarning, stacklevel=2)
        return 0.0
    if mode == "eleven_point":
        # i / 10 rather than linspace: linspace(0, 1, 11)[3] is 0.30000000000000004,
        # which would miss a recall of exactly 3/10
        peaks = [precision[recall >= i / 10].max(initial=0.0) for i in range(11)]
        return float(sum(peaks) / 11.0)
    if mode == "all_points":
        mrec = np.concatenate(([0.0], recall, [1.0]))
        mpre = np.concatenate(([0.0], precision, [0.0]))
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        steps = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    raise ValueError(f"unknown AP mode {mode!r}")


def _class_pr(dets, gts, cls: int, thr: float):
    """dets: list of (image_id, label, score, box); gts: image_id -> (boxes, labels, difficult)."""
    gt_boxes, gt_used, n_gt = {}, {}, 0
    for img, (boxes, labels, difficult) in gts.items():
        sel = np.asarray(labels) == cls
        gt_boxes[img] = (np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[sel], np.asarray(difficult, dtype=bool)[sel])
        gt_used[img] = np.zeros(int(sel.sum()), dtype=bool)
        n_gt += int((~gt_boxes[img][1]).sum())
    mine = [(i, d) for i, d in enumerate(dets) if d[1] == cls]
    mine.sort(key=lambda t: (-t[1][2], t[0]))
    flags = []  # 1 = TP, 0 = FP, None = ignored
    scores = []
    for _, (img, _, score, box) in mine:
        boxes, difficult = gt_boxes.get(img, (np.zeros((0, 4)), np.zeros(0, dtype=bool)))
        flag = 0
        if len(boxes):
            ov = iou_matrix(np.asarray(box, dtype=np.float64)[None], boxes)[0]
            j = int(ov.argmax())
            if ov[j] >= thr:
                if difficult[j]:
                    flag = None
                elif not gt_used[img][j]:
                    gt_used[img][j] = True
                    flag = 1
        if flag is not None:
            flags.append(flag)
            scores.append(score)
    flags = np.asarray(flags, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    # one curve point per distinct score: last index of each tie group
    last = np.flatnonzero(np.append(scores[1:] != scores[:-1], True)) if len(scores) else np.zeros(0, dtype=int)
    tp_c, fp_c = tp[last], fp[last]
    recall = tp_c / n_gt if n_gt else np.zeros_like(tp_c)
    precision = tp_c / np.maximum(tp_c + fp_c, np.finfo(np.float64).eps)
    return recall, precision, int(flags.sum()), int(len(flags) - flags.sum()), n_gt


def evaluate(dets: Sequence, gts: dict, iou_thresholds: Sequence[float] = (0.5,), mode: str = "eleven_point",
             classes: Sequence[int] | None = None) -> EvalResult:
    """Per-class AP and mAP, averaged over ``iou_thresholds``.

    ``dets``: iterable of (image_id, label, score, box[4]).
    ``gts``: image_id -> (boxes (M, 4), labels (M,)) or (boxes, labels, difficult).
    """
    dets = [(d[0], int(d[1]), float(d[2]), np.asarray(d[3], dtype=np.float64)) for d in dets]
    norm = {}
    for img, g in gts.items():
        boxes, labels = g[0], np.asarray(g[1], dtype=np.int64)
        difficult = g[2] if len(g) > 2 else np.zeros(len(labels), dtype=bool)
        norm[img] = (boxes, labels, difficult)
    if classes is None:
        classes = sorted({int(l) for _, labels, _ in norm.values() for l in labels})
    thresholds = tuple(float(t) for t in iou_thresholds)
    res = EvalResult({}, 0.0, iou_thresholds=thresholds, mode=mode)
    for c in classes:
        aps = []
        for k, thr in enumerate(thresholds):
            rec, prec, tp, fp, n_gt = _class_pr(dets, norm, c, thr)
            if n_gt == 0:
                break
            aps.append(voc_ap(rec, prec, mode) if len(rec) else 0.0)
            if k == 0:
                res.precision[c], res.recall[c] = prec.tolist(), rec.tolist()
                res.tp[c], res.fp[c], res.n_gt[c] = tp, fp, n_gt
        if aps:
            res.ap[c] = float(np.mean(aps))
    res.map = float(np.mean(list(res.ap.values()))) if res.ap else 0.0
    return res


COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2))
