"""SSD-style detection head utilities.

Boxes are numpy arrays.  Corner form is (xmin, ymin, xmax, ymax); center
form is (cx, cy, w, h).  Priors are in center form, normalized to [0, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANCES = (0.1, 0.2)


@dataclass(frozen=True)
class PriorLayer:
    feature_size: int
    priors: int
    scale: float
    next_scale: float

    def __post_init__(self):
        if self.priors not in (4, 6):
            raise ValueError(f"prior count must be 4 or 6, got {self.priors}")
        if self.feature_size < 1:
            raise ValueError("feature size must be positive")


@dataclass(frozen=True)
class HeadConfig:
    layers: tuple[PriorLayer, ...]
    variances: tuple[float, float] = VARIANCES
    num_classes: int = 4  # including background 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        return cls(tuple(PriorLayer(**l) for l in d["layers"]), tuple(d["variances"]), d["num_classes"])

    @classmethod
    def build(cls, feature_sizes: Sequence[int], priors: Sequence[int], min_scale=0.15, max_scale=0.9,
              num_classes=4, variances=VARIANCES) -> "HeadConfig":
        """Scales evenly spaced in [min_scale, max_scale], as in SSD."""
        m = len(feature_sizes)
        step = (max_scale - min_scale) / max(m - 1, 1)
        scales = [min_scale + step * k for k in range(m)] + [min(1.0, max_scale + step)]
        layers = tuple(PriorLayer(f, p, scales[k], scales[k + 1]) for k, (f, p) in enumerate(zip(feature_sizes, priors)))
        return cls(layers, tuple(variances), num_classes)


@dataclass
class Detection:
    box: np.ndarray
    label: int
    score: float

    def to_json(self, image_id, image_size: float = 1.0) -> str:
        x0, y0, x1, y1 = (float(v) * image_size for v in self.box)
        return json.dumps({"image_id": image_id, "class": int(self.label), "score": float(self.score),
                           "xmin": x0, "ymin": y0, "xmax": x1, "ymax": y1})


def _cell_shapes(layer: PriorLayer) -> list[tuple[float, float]]:
    s, s_next = layer.scale, layer.next_scale
    shapes = [(s, s), (math.sqrt(s * s_next),) * 2]
    ratios = [2.0] if layer.priors == 4 else [2.0, 3.0]
    for r in ratios:
        shapes.append((s * math.sqrt(r), s / math.sqrt(r)))
        shapes.append((s / math.sqrt(r), s * math.sqrt(r)))
    return shapes


def gen_priors(cfg: HeadConfig) -> np.ndarray:
    """(P, 4) center-form priors, layer-major, row-major, shape-minor."""
    out = []
    for layer in cfg.layers:
        f = layer.feature_size
        shapes = _cell_shapes(layer)
        for i in range(f):
            for j in range(f):
                cx, cy = (j + 0.5) / f, (i + 0.5) / f
                out.extend((cx, cy, w, h) for w, h in shapes)
    return np.asarray(out, dtype=np.float64).reshape(-1, 4)


def num_priors(cfg: HeadConfig) -> int:
    return sum(l.feature_size ** 2 * l.priors for l in cfg.layers)


def center_to_corner(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def corner_to_center(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def iou(a, b) -> float:
    """IoU of two corner-form boxes."""
    return float(iou_matrix(np.asarray(a, dtype=np.float64)[None, :4], np.asarray(b, dtype=np.float64)[None, :4])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, (len(a), len(b)), corner-form inputs."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def match_priors(gt_boxes: np.ndarray, gt_labels: np.ndarray, priors: np.ndarray, threshold: float = 0.5):
    """Assign ground truths to priors.

    Every GT first claims its best-IoU prior (later GTs win conflicts), then
    each remaining prior takes its best GT when IoU >= ``threshold``.

    Returns ``(labels, gt_index)``: per-prior class (0 = background) and the
    index of the matched GT (-1 for background).
    """
    n_priors = len(priors)
    if n_priors == 0:
        raise ValueError("match_priors: no priors")
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    if len(gt_boxes) == 0:
        return np.zeros(n_priors, dtype=np.int64), np.full(n_priors, -1, dtype=np.int64)
    overlaps = iou_matrix(gt_boxes, center_to_corner(priors))
    best_gt = overlaps.argmax(axis=0)
    best_gt_iou = overlaps[best_gt, np.arange(n_priors)]
    for g, p in enumerate(overlaps.argmax(axis=1)):
        best_gt[p] = g
        best_gt_iou[p] = 2.0
    positive = best_gt_iou >= threshold
    labels = np.where(positive, gt_labels[best_gt], 0)
    return labels, np.where(positive, best_gt, -1)


def encode(gt: np.ndarray, priors: np.ndarray, variances=VARIANCES) -> np.ndarray:
    """Offsets of corner-form ``gt`` relative to center-form ``priors``."""
    g = corner_to_center(gt)
    priors = np.asarray(priors, dtype=np.float64)
    if np.any(g[..., 2:] <= 0):
        raise ValueError("encode: ground-truth boxes must have positive extent")
    vc, vs = variances
    return np.concatenate([
        (g[..., :2] - priors[..., :2]) / (priors[..., 2:] * vc),
        np.log(g[..., 2:] / priors[..., 2:]) / vs,
    ], axis=-1)


def decode(loc: np.ndarray, priors: np.ndarray, variances=VARIANCES, clip: bool = False) -> np.ndarray:
    """Inverse of :func:`encode`; returns corner-form boxes."""
    loc = np.asarray(loc, dtype=np.float64)
    priors = np.asarray(priors, dtype=np.float64)
    vc, vs = variances
    centers = priors[..., :2] + loc[..., :2] * vc * priors[..., 2:]
    sizes = priors[..., 2:] * np.exp(loc[..., 2:] * vs)
    boxes = center_to_corner(np.concatenate([centers, sizes], axis=-1))
    return np.clip(boxes, 0.0, 1.0) if clip else boxes


def build_targets(gts: Sequence[tuple[np.ndarray, np.ndarray]], priors: np.ndarray, threshold=0.5, variances=VARIANCES):
    """Stack per-image matches: labels (N, P) and loc targets (N, P, 4)."""
    labels = np.zeros((len(gts), len(priors)), dtype=np.int64)
    loc = np.zeros((len(gts), len(priors), 4), dtype=np.float64)
    for i, (boxes, cls) in enumerate(gts):
        lab, idx = match_priors(boxes, cls, priors, threshold)
        labels[i] = lab
        pos = idx >= 0
        if pos.any():
            loc[i, pos] = encode(np.asarray(boxes, dtype=np.float64)[idx[pos]], priors[pos], variances)
    return labels, loc


def hard_negatives(losses: np.ndarray, positive: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` highest-loss non-positive entries; ties go to the
    lower index."""
    cand = np.flatnonzero(~positive)
    order = np.lexsort((cand, -losses[cand]))
    return np.sort(cand[order[:k]])


def multibox_loss(cls_logits: Tensor, loc_pred: Tensor, labels: np.ndarray, loc_targets: np.ndarray,
                  neg_pos_ratio: int = 3) -> tuple[Tensor, Tensor]:
    """Classification and localization losses, both divided by the number of
    positives in the batch.

    ``cls_logits`` is (N, P, K), ``loc_pred`` (N, P, 4).  Classification uses
    all positives plus, per image, the ``neg_pos_ratio * n_pos`` hardest
    negatives; an image without positives contributes its
    ``neg_pos_ratio`` hardest negatives.
    """
    n, p, k = cls_logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(n, p)
    pos = labels > 0
    n_pos = int(pos.sum())
    denom = float(max(n_pos, 1))

    ce = T.softmax_ce(T.reshape(cls_logits, (n * p, k)), labels.reshape(-1))
    ce_np = ce.data.reshape(n, p)
    selected = []
    for i in range(n):
        npos_i = int(pos[i].sum())
        quota = neg_pos_ratio * npos_i if npos_i else neg_pos_ratio
        negs = hard_negatives(ce_np[i], pos[i], quota)
        selected.append(i * p + np.union1d(np.flatnonzero(pos[i]), negs))
    loss_cls = T.mul_scalar(T.total(T.take_rows(ce, np.concatenate(selected))), 1.0 / denom)

    pos_idx = np.flatnonzero(pos.reshape(-1))
    flat_loc = T.reshape(loc_pred, (n * p, 4))
    if len(pos_idx):
        target = Tensor(loc_targets.reshape(n * p, 4)[pos_idx].astype(loc_pred.dtype))
        loss_loc = T.mul_scalar(T.total(T.smooth_l1(T.take_rows(flat_loc, pos_idx), target)), 1.0 / denom)
    else:
        loss_loc = T.mul_scalar(T.total(flat_loc), 0.0)
    return loss_cls, loss_loc


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.45, top_k: int = 200) -> np.ndarray:
    """Greedy suppression.  Returns kept indices in descending score order;
    equal scores are visited lowest index first."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    while order.size and len(keep) < top_k:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ov = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ov <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def postprocess(cls_logits: np.ndarray, loc: np.ndarray, priors: np.ndarray, conf_threshold: float = 0.01,
                iou_threshold: float = 0.45, top_k: int = 200, variances=VARIANCES) -> list[Detection]:
    """Detections for one image from raw (P, K) logits and (P, 4) offsets."""
    probs = softmax(np.asarray(cls_logits, dtype=np.float64))
    boxes = decode(loc, priors, variances, clip=True)
    cand_boxes, cand_scores, cand_labels = [], [], []
    for c in range(1, probs.shape[1]):
        idx = np.flatnonzero(probs[:, c] > conf_threshold)
        if not idx.size:
            continue
        keep = idx[nms(boxes[idx], probs[idx, c], iou_threshold, top_k)]
        cand_boxes.append(boxes[keep])
        cand_scores.append(probs[keep, c])
        cand_labels.append(np.full(len(keep), c))
    if not cand_scores:
        return []
    b, s, l = np.concatenate(cand_boxes), np.concatenate(cand_scores), np.concatenate(cand_labels)
    order = np.lexsort((np.arange(len(s)), -s))[:top_k]
    return [Detection(b[i], int(l[i]), float(s[i])) for i in order]


def write_detections(path, per_image: Iterable[tuple[str, list[Detection]]], image_size: float) -> None:
    with open(path, "w") as fh:
        for image_id, dets in per_image:
            for d in dets:
                fh.write(d.to_json(image_id, image_size) + "\n")


def read_detections(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
