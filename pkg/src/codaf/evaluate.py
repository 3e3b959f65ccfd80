"""COCO-style average precision with all-points interpolation."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .model import Detection

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.clip(rb - lt, 0, None).prod(axis=2)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """Area under the monotone precision envelope; ``tp`` is score-ordered."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(steps * envelope))


def class_ap(dets: Sequence[tuple[int, float, tuple]], gts: Sequence[tuple[int, tuple]],
             thresholds: Sequence[float]) -> list[float]:
    """AP of one class at each IoU threshold.

    ``dets`` holds ``(image_id, score, box)``, ``gts`` holds ``(image_id, box)``.
    Detections are ranked by score (ties by input order) and greedily matched
    to the highest-IoU unmatched ground truth in the same image.
    """
    n_gt = len(gts)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    by_image: dict[int, list[int]] = {}
    for g, (img, _) in enumerate(gts):
        by_image.setdefault(img, []).append(g)
    gt_boxes = np.array([b for _, b in gts], dtype=np.float64).reshape(-1, 4)
    det_boxes = np.array([dets[i][2] for i in order], dtype=np.float64).reshape(-1, 4)
    det_imgs = [dets[i][0] for i in order]
    ious = []
    for k, img in enumerate(det_imgs):
        cand = by_image.get(img, [])
        ious.append((cand, iou_matrix(det_boxes[k:k + 1], gt_boxes[cand])[0] if cand else np.zeros(0)))
    out = []
    for thr in thresholds:
        used = np.zeros(n_gt, dtype=bool)
        tp = np.zeros(len(order))
        for k, (cand, row) in enumerate(ious):
            if not cand:
                continue
            masked = np.where(used[cand], -1.0, row)
            best = int(np.argmax(masked))
            if masked[best] >= thr:
                used[cand[best]] = True
                tp[k] = 1
        out.append(average_precision(tp, n_gt))
    return out


def evaluate_detections(predictions: Sequence[Sequence[Detection]],
                        ground_truth: Sequence[Sequence[tuple]],
                        num_classes: int) -> dict:
    """Per-class and mean AP@.5 and AP@[.5:.95]; classes without ground truth are skipped in the mean."""
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth cover different image counts")
    per_class = {}
    for c in range(num_classes):
        dets = [(img, d.score, d.box) for img, ds in enumerate(predictions) for d in ds if d.class_id == c]
        gts = [(img, box) for img, objs in enumerate(ground_truth) for box, cls in objs if cls == c]
        if not gts:
            continue
        aps = class_ap(dets, gts, COCO_THRESHOLDS)
        per_class[c] = {"ap50": aps[0], "ap50_95": float(np.mean(aps)), "n_gt": len(gts), "n_det": len(dets)}
    if per_class:
        ap50 = float(np.mean([v["ap50"] for v in per_class.values()]))
        ap50_95 = float(np.mean([v["ap50_95"] for v in per_class.values()]))
    else:
        ap50 = ap50_95 = 0.0
    return {"ap50": ap50, "ap50_95": ap50_95, "per_class": per_class}
