"""Behavioral analyses: object ordering patterns and error diagnosis.

Ordering is quantified by rank correlation between the model's emission order
and reference orders (right-to-left, bottom-to-top, large-to-small, their
reverses, or orders induced by encoder activations). Error diagnosis matches
predictions to ground truth at IoU 0.5 and buckets the false positives into
five mutually exclusive categories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations

import numpy as np
import torch
import torch.nn.functional as F

from .core import binarize, center_of_mass
from .metrics import mask_iou

AXIS_THRESHOLD = 0.15   # fraction of the image axis / area
MIN_PAIR_COUNT = 20     # class pairs seen fewer times are not reported
FN_SIZE_EDGES = (0.005, 0.01, 0.03, 0.05, 0.10, 0.15)  # upper bin edges, area fraction


class SortStrategy(str, Enum):
    R2L = "r2l"  # right to left: descending center column
    B2T = "b2t"  # bottom to top: descending center row
    L2S = "l2s"  # large to small: descending pixel area
    L2R = "l2r"
    T2B = "t2b"
    S2L = "s2l"

    @property
    def reverse(self) -> "SortStrategy":
        return _REVERSE[self]


_REVERSE = {
    SortStrategy.R2L: SortStrategy.L2R, SortStrategy.L2R: SortStrategy.R2L,
    SortStrategy.B2T: SortStrategy.T2B, SortStrategy.T2B: SortStrategy.B2T,
    SortStrategy.L2S: SortStrategy.S2L, SortStrategy.S2L: SortStrategy.L2S,
}


class FPCategory(str, Enum):
    LOC = "Loc"          # right class, IoU in [0.1, 0.5)
    BG = "Bg"            # below 0.1 IoU against everything
    DUP = "Dup"          # >= 0.5 IoU with an already-claimed same-class object
    CLS = "Cls"          # >= 0.5 IoU but wrong class
    LOC_CLS = "LocCls"   # wrong class and IoU in [0.1, 0.5)


def kendall_tau(order_a, order_b) -> float:
    """(P - Q) / (N(N-1)/2) over item pairs of two orderings of the same items."""
    a = list(order_a)
    b = list(order_b)
    if len(a) < 2:
        raise ValueError("kendall_tau needs at least 2 items")
    pos_a = {item: i for i, item in enumerate(a)}
    pos_b = {item: i for i, item in enumerate(b)}
    if len(pos_a) != len(a) or set(pos_a) != set(pos_b) or len(a) != len(b):
        raise ValueError("orders must be permutations of the same distinct items")
    concordant = discordant = 0
    for x, y in combinations(a, 2):
        s = (pos_a[x] - pos_a[y]) * (pos_b[x] - pos_b[y])
        if s > 0:
            concordant += 1
        elif s < 0:
            discordant += 1
    n = len(a)
    return (concordant - discordant) / (n * (n - 1) / 2)


def _mask_stats(masks):
    """(center_row, center_col, area) per binary mask."""
    stats = []
    for m in masks:
        row, col = center_of_mass(m)
        stats.append((row, col, int(np.asarray(m, dtype=bool).sum())))
    return stats


def _strategy_order(stats, strategy: SortStrategy) -> list[int]:
    """Emission indices sorted by the strategy key; ties keep emission order."""
    key = {
        SortStrategy.R2L: lambda s: -s[1], SortStrategy.L2R: lambda s: s[1],
        SortStrategy.B2T: lambda s: -s[0], SortStrategy.T2B: lambda s: s[0],
        SortStrategy.L2S: lambda s: -s[2], SortStrategy.S2L: lambda s: s[2],
    }[strategy]
    return sorted(range(len(stats)), key=lambda i: key(stats[i]))


def strategy_correlation(seq, strategy: SortStrategy, mask_threshold: float = 0.5) -> float:
    """Kendall tau between the emission order and one reference sorting."""
    masks = [binarize(p.mask_array(), mask_threshold) for p in seq]
    return masked_strategy_correlation(masks, strategy)


def masked_strategy_correlation(masks, strategy: SortStrategy) -> float:
    stats = _mask_stats(masks)
    if len(stats) < 2:
        raise ValueError("need at least 2 nonempty masks")
    order = _strategy_order(stats, SortStrategy(strategy))
    return kendall_tau(range(len(stats)), order)


def pair_direction_stats(sequences, mask_threshold: float = 0.5,
                         axis_threshold: float = AXIS_THRESHOLD,
                         min_count: int = MIN_PAIR_COUNT) -> dict:
    """Directional counts for consecutive prediction pairs, per ordered class pair.

    A pair votes on an axis only when the difference along it exceeds the
    threshold fraction of the image extent (area votes use the threshold as a
    fraction of the image area). Class pairs seen fewer than ``min_count``
    times are dropped from the result.
    """
    tallies: dict[tuple[int, int], dict[str, int]] = {}
    for seq in sequences:
        entries = []
        for pred in seq:
            mask = binarize(pred.mask_array(), mask_threshold)
            if not mask.any():
                entries.append(None)
                continue
            row, col = center_of_mass(mask)
            entries.append((pred.class_id, row, col, int(mask.sum()), mask.shape))
        for first, second in zip(entries, entries[1:]):
            if first is None or second is None:
                continue
            c1, r1, x1, a1, (h, w) = first
            c2, r2, x2, a2, _ = second
            t = tallies.setdefault(
                (c1, c2), {"count": 0, "r2l": 0, "l2r": 0, "b2t": 0, "t2b": 0, "l2s": 0, "s2l": 0}
            )
            t["count"] += 1
            if x1 - x2 > axis_threshold * w:
                t["r2l"] += 1
            elif x2 - x1 > axis_threshold * w:
                t["l2r"] += 1
            if r1 - r2 > axis_threshold * h:
                t["b2t"] += 1
            elif r2 - r1 > axis_threshold * h:
                t["t2b"] += 1
            if a1 - a2 > axis_threshold * h * w:
                t["l2s"] += 1
            elif a2 - a1 > axis_threshold * h * w:
                t["s2l"] += 1
    return {pair: t for pair, t in tallies.items() if t["count"] >= min_count}


# ---------------------------------------------------------------------------
# error diagnosis


@dataclass
class MatchedImage:
    """Greedy-matching outcome for one image at the diagnosis threshold."""

    tp: list[tuple[int, int, float]] = field(default_factory=list)  # (step, gt index, IoU)
    fp: list[tuple[int, FPCategory]] = field(default_factory=list)  # (step, category)
    unmatched_gts: list[int] = field(default_factory=list)


def match_image(preds, gts, iou_threshold: float = 0.5,
                mask_threshold: float = 0.5) -> MatchedImage:
    """Rank predictions by score, claim ground truths greedily, bucket the rest."""
    masks = [binarize(p.mask_array(), mask_threshold) for p in preds]
    order = sorted(range(len(masks)), key=lambda t: (-preds[t].score, t))
    claimed = [False] * len(gts)
    result = MatchedImage()
    for t in order:
        ious = [mask_iou(masks[t], gt.mask) for gt in gts]
        pred_class = preds[t].class_id
        best_j = -1
        best_iou = 0.0
        for j, gt in enumerate(gts):
            if gt.class_id != pred_class or claimed[j] or ious[j] < iou_threshold:
                continue
            if ious[j] > best_iou:
                best_iou, best_j = ious[j], j
        if best_j >= 0:
            claimed[best_j] = True
            result.tp.append((t, best_j, best_iou))
            continue

        same = [iou for iou, gt in zip(ious, gts) if gt.class_id == pred_class]
        other = [iou for iou, gt in zip(ious, gts) if gt.class_id != pred_class]
        if same and max(same) >= iou_threshold:
            category = FPCategory.DUP
        elif other and max(other) >= iou_threshold:
            category = FPCategory.CLS
        elif same and max(same) >= 0.1:
            category = FPCategory.LOC
        elif other and max(other) >= 0.1:
            category = FPCategory.LOC_CLS
        else:
            category = FPCategory.BG
        result.fp.append((t, category))
    result.unmatched_gts = [j for j, c in enumerate(claimed) if not c]
    return result


def classify_false_positives(preds_per_image, gts_per_image,
                             mask_threshold: float = 0.5) -> dict[FPCategory, int]:
    """Histogram of false-positive categories over a dataset."""
    counts = {c: 0 for c in FPCategory}
    for preds, gts in zip(preds_per_image, gts_per_image):
        for _t, category in match_image(preds, gts, mask_threshold=mask_threshold).fp:
            counts[category] += 1
    return counts


def _size_bin(area_fraction: float) -> int:
    return int(np.searchsorted(FN_SIZE_EDGES, area_fraction, side="left"))


def fn_size_histogram(preds_per_image, gts_per_image,
                      mask_threshold: float = 0.5) -> list[int]:
    """False negatives bucketed by covered image fraction; one overflow bin."""
    counts = [0] * (len(FN_SIZE_EDGES) + 1)
    for preds, gts in zip(preds_per_image, gts_per_image):
        matched = match_image(preds, gts, mask_threshold=mask_threshold)
        for j in matched.unmatched_gts:
            gt = gts[j]
            counts[_size_bin(gt.area / gt.mask.size)] += 1
    return counts


def iou_vs_timestep(preds_per_image, gts_per_image,
                    mask_threshold: float = 0.5) -> dict[int, float]:
    """Mean true-positive IoU per 1-based emission step; stepless entries omitted."""
    buckets: dict[int, list[float]] = {}
    for preds, gts in zip(preds_per_image, gts_per_image):
        for t, _j, iou in match_image(preds, gts, mask_threshold=mask_threshold).tp:
            buckets.setdefault(t + 1, []).append(iou)
    return {step: float(np.mean(v)) for step, v in sorted(buckets.items())}


def iou_vs_size(preds_per_image, gts_per_image,
                mask_threshold: float = 0.5) -> dict[int, float]:
    """Mean true-positive IoU per ground-truth size bin (same bins as FNs)."""
    buckets: dict[int, list[float]] = {}
    for preds, gts in zip(preds_per_image, gts_per_image):
        for _t, j, iou in match_image(preds, gts, mask_threshold=mask_threshold).tp:
            gt = gts[j]
            buckets.setdefault(_size_bin(gt.area / gt.mask.size), []).append(iou)
    return {b: float(np.mean(v)) for b, v in sorted(buckets.items())}


# ---------------------------------------------------------------------------
# encoder-activation ordering


def activation_scores(masks, feature_map: torch.Tensor) -> list[float]:
    """Mean absolute activation under each mask, features upsampled to mask size."""
    h, w = np.asarray(masks[0]).shape
    feats = feature_map.detach().unsqueeze(0).float()
    up = F.interpolate(feats, size=(h, w), mode="bilinear", align_corners=False)[0]
    magnitude = up.abs().mean(dim=0).numpy()
    return [float(magnitude[np.asarray(m, dtype=bool)].mean()) for m in masks]


def activation_order_correlation(masks, feature_map: torch.Tensor) -> float:
    """Tau between emission order and descending activation score order."""
    if len(masks) < 2:
        raise ValueError("need at least 2 masks")
    scores = activation_scores(masks, feature_map)
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    return kendall_tau(range(len(scores)), order)


# ---------------------------------------------------------------------------
# report


@dataclass
class AnalysisReport:
    strategy_tau: dict[str, float]
    activation_tau: dict[str, dict[str, float]]  # block -> {untrained, trained}
    fp_counts: dict[str, int]
    fn_size_histogram: list[int]
    iou_vs_timestep: dict[int, float]
    iou_vs_size: dict[int, float]
    pair_directions: dict[str, dict[str, int]]
    num_images: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "num_images": self.num_images,
                "strategy_tau": self.strategy_tau,
                "activation_tau": self.activation_tau,
                "fp_counts": self.fp_counts,
                "fn_size_histogram": self.fn_size_histogram,
                "fn_size_bin_edges_percent": [e * 100 for e in FN_SIZE_EDGES],
                "iou_vs_timestep": {str(k): v for k, v in self.iou_vs_timestep.items()},
                "iou_vs_size": {str(k): v for k, v in self.iou_vs_size.items()},
                "pair_directions": self.pair_directions,
            },
            indent=1,
        )


def analyze_dataset(trained_model, untrained_model, records, stop_threshold: float = 0.5,
                    max_steps: int = 8, mask_threshold: float = 0.5) -> AnalysisReport:
    """Run inference over records and assemble the full behavioral report."""
    from .model import image_to_tensor  # local import to avoid a cycle

    preds_per_image = []
    gts_per_image = []
    mask_lists = []
    images = []
    for record in records:
        seq = trained_model.infer(record.image, stop_threshold, max_steps)
        preds_per_image.append(seq)
        gts_per_image.append(record.instances)
        masks = [binarize(p.mask_array(), mask_threshold) for p in seq]
        mask_lists.append([m for m in masks if m.any()])
        images.append(record.image)

    strategy_tau = {}
    for strategy in SortStrategy:
        taus = [
            masked_strategy_correlation(masks, strategy)
            for masks in mask_lists
            if len(masks) >= 2
        ]
        if taus:
            strategy_tau[strategy.value] = float(np.mean(taus))

    activation_tau: dict[str, dict[str, float]] = {}
    num_blocks = trained_model.encoder_cfg.num_blocks
    with torch.no_grad():
        per_block: dict[int, dict[str, list[float]]] = {
            i: {"untrained": [], "trained": []} for i in range(num_blocks)
        }
        for image, masks in zip(images, mask_lists):
            if len(masks) < 2:
                continue
            x = image_to_tensor(image)
            for label, model in (("untrained", untrained_model), ("trained", trained_model)):
                pyramid = model.encoder(x)
                for i in range(num_blocks):
                    tau = activation_order_correlation(masks, pyramid[i][0])
                    per_block[i][label].append(tau)
    for i, taus in per_block.items():
        if taus["trained"]:
            activation_tau[f"f{i}"] = {
                label: float(np.mean(values)) for label, values in taus.items()
            }

    fp_counts = classify_false_positives(preds_per_image, gts_per_image, mask_threshold)
    report = AnalysisReport(
        strategy_tau=strategy_tau,
        activation_tau=activation_tau,
        fp_counts={c.value: n for c, n in fp_counts.items()},
        fn_size_histogram=fn_size_histogram(preds_per_image, gts_per_image, mask_threshold),
        iou_vs_timestep=iou_vs_timestep(preds_per_image, gts_per_image, mask_threshold),
        iou_vs_size=iou_vs_size(preds_per_image, gts_per_image, mask_threshold),
        pair_directions={
            f"{a}->{b}": t for (a, b), t in
            pair_direction_stats(preds_per_image, mask_threshold).items()
        },
        num_images=len(records),
    )
    return report
