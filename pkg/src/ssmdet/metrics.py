"""Detection metrics: 101-point interpolated AP with greedy matching.

Matching follows the usual evaluation protocol: within each class and IoU
threshold, predictions are visited in descending score order and each one
claims the unmatched ground truth with the highest IoU at or above the
threshold. Precision/recall are micro-averaged at a fixed operating
confidence (0.25 here, a local convention).
"""

from __future__ import annotations

import numpy as np

__all__ = ["MAP_THRESHOLDS", "eval_map", "iou_xyxy"]

MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
_RECALL_GRID = np.linspace(0.0, 1.0, 101)
_PR_CONFIDENCE = 0.25


def iou_xyxy(a, b) -> float:
    ix1 = max(a[0], b[0])
    iy1 = max(a[1], b[1])
    ix2 = min(a[2], b[2])
    iy2 = min(a[3], b[3])
    iw = max(0.0, ix2 - ix1)
    ih = max(0.0, iy2 - iy1)
    inter = iw * ih
    if inter <= 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _match_class(preds, gts, threshold: float):
    """Greedy match of one class within one image.

    ``preds`` arrive globally score-sorted; returns a TP flag per
    prediction, in the given order.
    """
    matched = [False] * len(gts)
    flags = []
    for box in preds:
        best, best_iou = -1, threshold
        for gi, gt_box in enumerate(gts):
            if matched[gi]:
                continue
            iou = iou_xyxy(box, gt_box)
            if iou >= best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            matched[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _average_precision(tp_flags: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP flags."""
    if num_gt == 0:
        return float("nan")
    if tp_flags.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp_flags)
    fp_cum = np.cumsum(~tp_flags)
    recall = tp_cum / num_gt
    precision = tp_cum / (tp_cum + fp_cum)
    ap = 0.0
    for r in _RECALL_GRID:
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / _RECALL_GRID.size


def eval_map(predictions, ground_truth, iou_thresholds=MAP_THRESHOLDS) -> dict:
    """Evaluate detections against annotations across a dataset.

    ``predictions``: per-image lists of objects with .box/.score/.class_id.
    ``ground_truth``: per-image lists of (class_id, box) pairs.
    Returns mAP50, mAP75, mAP50:95 plus precision/recall at IoU 0.5 and
    confidence 0.25. Classes without any ground truth are excluded from
    the mAP averages.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError(
            f"got {len(predictions)} prediction lists for {len(ground_truth)} images")
    classes = sorted({c for gts in ground_truth for c, _ in gts})
    ap: dict[tuple, float] = {}
    for thr in iou_thresholds:
        for cls in classes:
            flags: list[tuple] = []   # (score, order, tp) over all images
            num_gt = 0
            for img, (preds, gts) in enumerate(zip(predictions, ground_truth)):
                cls_gts = [box for c, box in gts if c == cls]
                num_gt += len(cls_gts)
                cls_preds = [d for d in preds if d.class_id == cls]
                cls_preds.sort(key=lambda d: -d.score)
                tp = _match_class([d.box for d in cls_preds], cls_gts, thr)
                flags.extend((d.score, img, t) for d, t in zip(cls_preds, tp))
            flags.sort(key=lambda row: (-row[0], row[1]))
            tp_flags = np.array([t for _, _, t in flags], dtype=bool)
            ap[(thr, cls)] = _average_precision(tp_flags, num_gt)

    def mean_over(thrs) -> float:
        # plain sequential mean so results are reproducible term for term
        vals = [ap[(t, c)] for t in thrs for c in classes if not np.isnan(ap[(t, c)])]
        return sum(vals) / len(vals) if vals else 0.0

    tp = fp = 0
    total_gt = sum(len(gts) for gts in ground_truth)
    for preds, gts in zip(predictions, ground_truth):
        for cls in {d.class_id for d in preds}:
            cls_preds = [d for d in preds if d.class_id == cls and d.score >= _PR_CONFIDENCE]
            cls_preds.sort(key=lambda d: -d.score)
            cls_gts = [box for c, box in gts if c == cls]
            matched = _match_class([d.box for d in cls_preds], cls_gts, 0.5)
            tp += sum(matched)
            fp += len(matched) - sum(matched)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / total_gt if total_gt else 0.0

    return {
        "mAP50": mean_over([0.5]) if 0.5 in iou_thresholds else float("nan"),
        "mAP75": mean_over([0.75]) if 0.75 in iou_thresholds else float("nan"),
        "mAP50:95": mean_over(iou_thresholds),
        "precision": precision,
        "recall": recall,
    }
