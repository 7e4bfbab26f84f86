"""Independent reference implementations the fast paths are tested against.

Everything here is written the dumbest possible way: scalar python loops,
selection instead of sorting, direct formula evaluation. None of it may
import the kernels it checks.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, w, bias=None, stride=1, padding=0, groups=1):
    """Direct nested-loop cross-correlation."""
    n, c_in, h, wd = x.shape
    c_out, c_g, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    og = c_out // groups
    out = np.zeros((n, c_out, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(c_out):
            grp = o // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c_g):
                        for ki in range(kh):
                            for kj in range(kw):
                                yy = i * stride + ki - padding
                                xx = j * stride + kj - padding
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += float(x[b, grp * c_g + ci, yy, xx]) * float(w[o, ci, ki, kj])
                    if bias is not None:
                        acc += float(bias[o])
                    out[b, o, i, j] = acc
    return out


def conv1d_loops(x, w):
    n, _, length = x.shape
    k = w.shape[2]
    pad = k // 2
    out = np.zeros((n, 1, length), dtype=np.float64)
    for b in range(n):
        for i in range(length):
            acc = 0.0
            for j in range(k):
                src = i + j - pad
                if 0 <= src < length:
                    acc += float(x[b, 0, src]) * float(w[0, 0, j])
            out[b, 0, i] = acc
    return out


def zoh_elementwise(a_mat, b_mat, delta_vec):
    """Term-by-term zero-order-hold values via math.exp."""
    d, n = a_mat.shape
    abar = np.zeros((d, n), dtype=np.float64)
    bbar = np.zeros((d, n), dtype=np.float64)
    for i in range(d):
        for j in range(n):
            a = float(a_mat[i, j])
            dt = float(delta_vec[i])
            abar[i, j] = math.exp(dt * a)
            if abs(a) < 1e-8:
                bbar[i, j] = dt * float(b_mat[i, j])
            else:
                bbar[i, j] = (math.exp(dt * a) - 1.0) / a * float(b_mat[i, j])
    return abar, bbar


def iou_scalar(a, b):
    ix1 = a[0] if a[0] > b[0] else b[0]
    iy1 = a[1] if a[1] > b[1] else b[1]
    ix2 = a[2] if a[2] < b[2] else b[2]
    iy2 = a[3] if a[3] < b[3] else b[3]
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def nms_bruteforce(dets, iou_threshold):
    """All-pairs suppression check against every higher-scored kept box."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept_idx = []
    for i in order:
        ok = True
        for j in kept_idx:
            if dets[j].class_id == dets[i].class_id and \
                    iou_scalar(dets[j].box, dets[i].box) >= iou_threshold:
                ok = False
                break
        if ok:
            kept_idx.append(i)
    return [dets[i] for i in kept_idx]


def eval_map_bruteforce(predictions, ground_truth, iou_thresholds):
    """Scalar-loop evaluator: selection-ordered greedy matching, direct
    101-point interpolation, micro P/R at confidence 0.25."""
    classes = sorted({c for gts in ground_truth for c, _ in gts})
    ap_values = {}
    for thr in iou_thresholds:
        for cls in classes:
            rows = []      # (score, image index, tp flag), selection-ordered
            num_gt = 0
            for img, (preds, gts) in enumerate(zip(predictions, ground_truth)):
                cls_gts = [box for c, box in gts if c == cls]
                num_gt += len(cls_gts)
                cls_preds = [d for d in preds if d.class_id == cls]
                remaining = list(range(len(cls_preds)))
                ordered = []
                while remaining:
                    best = remaining[0]
                    for k in remaining[1:]:
                        if cls_preds[k].score > cls_preds[best].score:
                            best = k
                    remaining.remove(best)
                    ordered.append(cls_preds[best])
                matched = [False] * len(cls_gts)
                for d in ordered:
                    pick, pick_iou = -1, -1.0
                    for gi, gt_box in enumerate(cls_gts):
                        if matched[gi]:
                            continue
                        iou = iou_scalar(d.box, gt_box)
                        if iou >= thr and iou >= pick_iou:
                            pick, pick_iou = gi, iou
                    if pick >= 0:
                        matched[pick] = True
                        rows.append((d.score, img, True))
                    else:
                        rows.append((d.score, img, False))
            # global selection order: descending score, then image index
            ordered_rows = []
            pool = list(rows)
            while pool:
                best = pool[0]
                for r in pool[1:]:
                    if r[0] > best[0] or (r[0] == best[0] and r[1] < best[1]):
                        best = r
                pool.remove(best)
                ordered_rows.append(best)
            if num_gt == 0:
                ap_values[(thr, cls)] = None
                continue
            if not ordered_rows:
                ap_values[(thr, cls)] = 0.0
                continue
            tp = fp = 0
            points = []
            for _, _, flag in ordered_rows:
                if flag:
                    tp += 1
                else:
                    fp += 1
                points.append((tp / num_gt, tp / (tp + fp)))
            total = 0.0
            for i in range(101):
                r = i / 100.0
                best_prec = 0.0
                for rec, prec in points:
                    if rec >= r - 1e-12 and prec > best_prec:
                        best_prec = prec
                total += best_prec
            ap_values[(thr, cls)] = total / 101.0

    def mean_over(thrs):
        vals = [ap_values[(t, c)] for t in thrs for c in classes
                if ap_values[(t, c)] is not None]
        return sum(vals) / len(vals) if vals else 0.0

    tp = fp = 0
    total_gt = sum(len(g) for g in ground_truth)
    for preds, gts in zip(predictions, ground_truth):
        for cls in sorted({d.class_id for d in preds}):
            cls_preds = [d for d in preds if d.class_id == cls and d.score >= 0.25]
            remaining = list(range(len(cls_preds)))
            ordered = []
            while remaining:
                best = remaining[0]
                for k in remaining[1:]:
                    if cls_preds[k].score > cls_preds[best].score:
                        best = k
                remaining.remove(best)
                ordered.append(cls_preds[best])
            cls_gts = [box for c, box in gts if c == cls]
            matched = [False] * len(cls_gts)
            for d in ordered:
                pick, pick_iou = -1, -1.0
                for gi, gt_box in enumerate(cls_gts):
                    if matched[gi]:
                        continue
                    iou = iou_scalar(d.box, gt_box)
                    if iou >= 0.5 and iou >= pick_iou:
                        pick, pick_iou = gi, iou
                if pick >= 0:
                    matched[pick] = True
                    tp += 1
                else:
                    fp += 1
    return {
        "mAP50": mean_over([t for t in iou_thresholds if t == 0.5]),
        "mAP75": mean_over([t for t in iou_thresholds if t == 0.75]),
        "mAP50:95": mean_over(iou_thresholds),
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "recall": tp / total_gt if total_gt else 0.0,
    }


def random_detections(rng, n_images, max_boxes, n_classes, frame=100.0):
    """Random prediction/ground-truth pairs for oracle comparisons."""
    from ssmdet.model import Detection

    preds, gts = [], []
    for _ in range(n_images):
        boxes = []
        for _ in range(int(rng.integers(0, max_boxes + 1))):
            x1, y1 = rng.uniform(0, frame * 0.7, 2)
            bw, bh = rng.uniform(5, frame * 0.3, 2)
            boxes.append((int(rng.integers(0, n_classes)),
                          (x1, y1, x1 + bw, y1 + bh)))
        gts.append(boxes)
        dets = []
        for _ in range(int(rng.integers(0, max_boxes + 1))):
            if boxes and rng.random() < 0.6:
                cls, (x1, y1, x2, y2) = boxes[int(rng.integers(0, len(boxes)))]
                jitter = rng.uniform(-6, 6, 4)
                box = (x1 + jitter[0], y1 + jitter[1],
                       max(x1 + jitter[0] + 2, x2 + jitter[2]),
                       max(y1 + jitter[1] + 2, y2 + jitter[3]))
                if rng.random() < 0.2:
                    cls = int(rng.integers(0, n_classes))
            else:
                x1, y1 = rng.uniform(0, frame * 0.7, 2)
                bw, bh = rng.uniform(5, frame * 0.3, 2)
                box = (x1, y1, x1 + bw, y1 + bh)
                cls = int(rng.integers(0, n_classes))
            dets.append(Detection(box=box, score=float(rng.random()), class_id=cls))
        preds.append(dets)
    return preds, gts
