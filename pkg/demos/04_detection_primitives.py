"""Priors, matching, box encoding, NMS and VOC AP on a toy scene.

    python3 demos/04_detection_primitives.py
"""
import numpy as np

from rfbnet.detector import HeadConfig, PriorLayer, center_to_corner, decode, encode, gen_priors, match_priors, nms
from rfbnet.evaluation import evaluate

cfg = HeadConfig.build(feature_sizes=(8, 4), priors=(6, 4))
priors = gen_priors(cfg)
print(f"{len(priors)} priors; first four (cx, cy, w, h):\n{priors[:4].round(3)}")

gt = np.array([[0.10, 0.10, 0.40, 0.35], [0.50, 0.45, 0.95, 0.90]])
labels, index = match_priors(gt, np.array([1, 2]), priors)
for g in range(len(gt)):
    print(f"gt {g}: {(index == g).sum()} matched priors, label {labels[index == g][0]}")

# encoding round-trips through decode exactly up to float error
pos = labels > 0
offsets = encode(gt[index[pos]], priors[pos])
print("max decode(encode) error:", np.abs(decode(offsets, priors[pos]) - gt[index[pos]]).max())

# three noisy predictions of the same object collapse to one
boxes = np.array([[10, 10, 40, 40], [12, 11, 41, 42], [9, 12, 38, 39], [50, 50, 60, 60]], float)
scores = np.array([0.9, 0.8, 0.7, 0.6])
print("kept by NMS:", nms(boxes, scores, 0.45).tolist())

gts = {0: (np.array([[10, 10, 40, 40], [50, 50, 60, 60]], float), np.array([1, 1]))}
dets = [(0, 1, s, b) for s, b in zip(scores, boxes)]
for mode in ("eleven_point", "all_points"):
    print(f"{mode:<13} AP = {evaluate(dets, gts, mode=mode).map:.4f}")
