"""Straight-line reference implementations used by the tests.

These deliberately avoid the vectorized code paths of the library.
"""
import numpy as np


def box_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def brute_nms(boxes, scores, thr, top_k=200):
    idx = list(range(len(scores)))
    idx.sort(key=lambda i: (-scores[i], i))
    keep, removed = [], set()
    for i in idx:
        if i in removed:
            continue
        if len(keep) == top_k:
            break
        keep.append(i)
        for j in idx:
            if j not in removed and j != i and j not in keep and box_iou(boxes[i], boxes[j]) > thr:
                removed.add(j)
    return keep


def brute_match(gt_boxes, gt_labels, priors_corner, thr):
    n_p, n_g = len(priors_corner), len(gt_boxes)
    ov = [[box_iou(gt_boxes[g], priors_corner[p]) for p in range(n_p)] for g in range(n_g)]
    best = []
    for p in range(n_p):
        g_best = 0
        for g in range(1, n_g):
            if ov[g][p] > ov[g_best][p]:
                g_best = g
        best.append([g_best, ov[g_best][p]])
    for g in range(n_g):
        p_best = 0
        for p in range(1, n_p):
            if ov[g][p] > ov[g][p_best]:
                p_best = p
        best[p_best] = [g, 2.0]
    labels = [int(gt_labels[g]) if v >= thr else 0 for g, v in best]
    index = [g if v >= thr else -1 for g, v in best]
    return labels, index


def reference_ap(dets, gts, cls, thr, mode):
    """dets: (img, label, score, box) list; gts: img -> (boxes, labels)."""
    n_gt = sum(int(np.sum(np.asarray(l) == cls)) for _, l in gts.values())
    if n_gt == 0:
        return None
    mine = sorted([(i, d) for i, d in enumerate(dets) if d[1] == cls], key=lambda t: (-t[1][2], t[0]))
    used = {img: [False] * len(l) for img, (_, l) in gts.items()}
    tp_flags, scores = [], []
    for _, (img, _, score, box) in mine:
        boxes, labels = gts[img]
        best, best_j = -1.0, -1
        for j, (b, l) in enumerate(zip(boxes, labels)):
            if l != cls:
                continue
            o = box_iou(box, b)
            if o > best:
                best, best_j = o, j
        hit = best >= thr and not used[img][best_j]
        if hit:
            used[img][best_j] = True
        tp_flags.append(1 if hit else 0)
        scores.append(score)
    rec, prec = [], []
    tp = fp = 0
    for k, f in enumerate(tp_flags):
        tp += f
        fp += 1 - f
        if k + 1 < len(scores) and scores[k + 1] == scores[k]:
            continue
        rec.append(tp / n_gt)
        prec.append(tp / (tp + fp))
    if not rec:
        return 0.0
    if mode == "eleven_point":
        total = 0.0
        for t in [i / 10 for i in range(11)]:
            cands = [p for r, p in zip(rec, prec) if r >= t]
            total += max(cands) if cands else 0.0
        return total / 11
    # all points: envelope integral
    r = [0.0] + rec + [1.0]
    p = [0.0] + prec + [0.0]
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    return sum((r[i + 1] - r[i]) * p[i + 1] for i in range(len(r) - 1))


def random_boxes(rng, n, size=1.0, min_side=0.05):
    xy = rng.uniform(0, size * 0.8, (n, 2))
    wh = rng.uniform(min_side * size, size * 0.4, (n, 2))
    return np.concatenate([xy, np.minimum(xy + wh, size)], axis=1)
