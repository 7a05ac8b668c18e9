"""Evaluation metrics: AP at IoU thresholds, symmetric best Dice, count error.

A prediction's class is the argmax of its class distribution and its ranking
score is stop_score * max class probability. Matching is greedy in rank order:
a prediction is a true positive iff its binarized mask reaches the IoU
threshold against a still-unmatched ground truth of the same class.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import binarize


def mask_iou(a, b) -> float:
    """Intersection over union of two binary masks; 0 when the union is empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = a.sum() + b.sum()
    if total == 0:
        return 0.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def _ranked_predictions(preds_per_image, class_id, mask_threshold):
    """(score, image, step, binary mask) for predictions of one class, best first."""
    entries = []
    for i, preds in enumerate(preds_per_image):
        for t, pred in enumerate(preds):
            if pred.class_id != class_id:
                continue
            entries.append((pred.score, i, t, binarize(pred.mask_array(), mask_threshold)))
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    return entries


def average_precision(preds_per_image, gts_per_image, class_id: int,
                      iou_threshold: float, mask_threshold: float = 0.5):
    """All-points-interpolated AP for one class; None when the class has no
    ground truth anywhere."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    num_positive = sum(
        sum(1 for g in gts if g.class_id == class_id) for gts in gts_per_image
    )
    if num_positive == 0:
        return None

    entries = _ranked_predictions(preds_per_image, class_id, mask_threshold)
    matched = [
        [False] * len(gts) for gts in gts_per_image
    ]
    tp = np.zeros(len(entries))
    for rank, (_score, i, _t, mask) in enumerate(entries):
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts_per_image[i]):
            if gt.class_id != class_id or matched[i][j]:
                continue
            iou = mask_iou(mask, gt.mask)
            if iou >= iou_threshold and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            matched[i][best_j] = True
            tp[rank] = 1.0
    if len(entries) == 0:
        return 0.0

    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / num_positive
    precision = tp_cum / (tp_cum + fp_cum)

    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([1.0], precision))
    for k in range(len(mpre) - 2, -1, -1):
        mpre[k] = max(mpre[k], mpre[k + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _best_dice(from_masks, to_masks) -> float:
    return float(np.mean([max(dice(a, b) for b in to_masks) for a in from_masks]))


def symmetric_best_dice(pred_masks, gt_masks) -> float:
    """min over directions of the mean best Dice between two mask sets."""
    pred_masks = list(pred_masks)
    gt_masks = list(gt_masks)
    if not pred_masks or not gt_masks:
        raise ValueError("symmetric_best_dice needs two nonempty mask sets")
    return min(_best_dice(pred_masks, gt_masks), _best_dice(gt_masks, pred_masks))


def difference_in_count(pred_counts, gt_counts) -> tuple[float, float]:
    """Mean signed and mean absolute count difference (scalars or sequences)."""
    pred = np.atleast_1d(np.asarray(pred_counts, dtype=np.float64))
    gts = np.atleast_1d(np.asarray(gt_counts, dtype=np.float64))
    if pred.shape != gts.shape:
        raise ValueError("count sequences must have equal length")
    if (pred < 0).any() or (gts < 0).any():
        raise ValueError("counts must be nonnegative")
    diff = pred - gts
    return float(diff.mean()), float(np.abs(diff).mean())


@dataclass
class EvalResult:
    iou_thresholds: list[float]
    per_class_ap: dict[int, dict[float, float]]  # class -> threshold -> AP
    mean_ap: dict[float, float] = field(default_factory=dict)
    sbd: float = 0.0
    dic_signed: float = 0.0
    dic_absolute: float = 0.0

    def to_json(self) -> str:
        payload = {
            "iou_thresholds": self.iou_thresholds,
            "per_class_ap": {
                str(c): {f"{t:g}": ap for t, ap in row.items()}
                for c, row in self.per_class_ap.items()
            },
            "mean_ap": {f"{t:g}": ap for t, ap in self.mean_ap.items()},
            "sbd": self.sbd,
            "dic_signed": self.dic_signed,
            "dic_absolute": self.dic_absolute,
        }
        return json.dumps(payload, indent=1)

    def write_csv(self, path) -> None:
        """Per-class AP table, one row per class, one column per threshold."""
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class_id"] + [f"ap@{t:g}" for t in self.iou_thresholds])
            for c in sorted(self.per_class_ap):
                row = self.per_class_ap[c]
                writer.writerow([c] + [f"{row[t]:.6f}" for t in self.iou_thresholds])
            writer.writerow(["mean"] + [f"{self.mean_ap[t]:.6f}" for t in self.iou_thresholds])


def evaluate_dataset(preds_per_image, gts_per_image, num_classes: int,
                     iou_thresholds=(0.5,), mask_threshold: float = 0.5) -> EvalResult:
    """Aggregate AP / SBD / DiC over a dataset of per-image sequences."""
    if len(preds_per_image) != len(gts_per_image):
        raise ValueError("prediction and ground-truth lists must align")
    thresholds = [float(t) for t in iou_thresholds]

    per_class: dict[int, dict[float, float]] = {}
    for c in range(num_classes):
        row = {}
        for t in thresholds:
            ap = average_precision(preds_per_image, gts_per_image, c, t, mask_threshold)
            if ap is not None:
                row[t] = ap
        if row:
            per_class[c] = row
    mean_ap = {
        t: float(np.mean([row[t] for row in per_class.values() if t in row]))
        for t in thresholds
        if any(t in row for row in per_class.values())
    }

    sbd_values = []
    for preds, gts in zip(preds_per_image, gts_per_image):
        if not gts:
            continue
        pred_masks = [binarize(p.mask_array(), mask_threshold) for p in preds]
        pred_masks = [m for m in pred_masks if m.any()]
        if not pred_masks:
            sbd_values.append(0.0)  # total miss
            continue
        sbd_values.append(symmetric_best_dice(pred_masks, [g.mask for g in gts]))
    sbd = float(np.mean(sbd_values)) if sbd_values else 0.0

    signed, absolute = difference_in_count(
        [len(p) for p in preds_per_image], [len(g) for g in gts_per_image]
    )
    return EvalResult(thresholds, per_class, mean_ap, sbd, signed, absolute)
