"""Running a detector over a dataset and scoring it."""
from __future__ import annotations

import numpy as np

from .data import Dataset
from .detector import Detection, gen_priors, postprocess
from .evaluation import EvalResult, evaluate
from .model import RFBDetector, to_input
from .tensor import Tensor


def detect(model: RFBDetector, images: np.ndarray, conf_threshold: float = 0.01, iou_threshold: float = 0.45,
           top_k: int = 200, batch_size: int = 50) -> list[list[Detection]]:
    """Per-image detections with boxes normalized to [0, 1]."""
    priors = gen_priors(model.cfg.head_config())
    variances = model.cfg.head_config().variances
    out = []
    for start in range(0, len(images), batch_size):
        x = to_input(images[start:start + batch_size])
        cls_logits, loc = model(Tensor(x))
        for c, l in zip(cls_logits.data, loc.data):
            out.append(postprocess(c, l, priors, conf_threshold, iou_threshold, top_k, variances))
    return out


def ground_truth(dataset: Dataset) -> dict:
    return {i: (dataset.boxes[i], dataset.labels[i]) for i in range(len(dataset))}


def as_records(per_image: list[list[Detection]], image_size: float) -> list[tuple]:
    """(image_index, label, score, pixel box) tuples for :func:`evaluate`."""
    return [(i, d.label, d.score, d.box * image_size) for i, dets in enumerate(per_image) for d in dets]


def evaluate_model(model: RFBDetector, dataset: Dataset, iou_thresholds=(0.5,), mode: str = "eleven_point",
                   **detect_kw) -> EvalResult:
    dets = detect(model, dataset.images, **detect_kw)
    classes = range(1, model.cfg.num_classes)
    return evaluate(as_records(dets, dataset.image_size), ground_truth(dataset), iou_thresholds, mode, classes)
