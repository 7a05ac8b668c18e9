"""Training objective: matched mask/box/class losses plus a stop loss.

Predictions are matched to ground-truth instances by minimum-cost bipartite
assignment over the soft-IoU cost matrix. The assignment is recomputed every
forward pass but treated as a constant of that pass: no gradient flows through
the combinatorial step, and predictions left unmatched receive no gradient at
all from the mask, box and class terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .core import AssignmentMatrix, EmptyInputError, GroundTruthInstance, PredictionSequence

EPS = 1e-7

TERMS = ("mask", "box", "class", "stop")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the box / class / stop terms (mask is the unit reference)
    plus the set of currently active terms for staged training."""

    box_weight: float = 1.0
    class_weight: float = 1.0
    stop_weight: float = 1.0
    active_terms: frozenset = frozenset(TERMS)

    def __post_init__(self):
        if min(self.box_weight, self.class_weight, self.stop_weight) < 0:
            raise ValueError("loss weights must be nonnegative")
        unknown = set(self.active_terms) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms: {sorted(unknown)}")


@dataclass
class LossBreakdown:
    """Per-term losses (torch scalars) and the assignment used to compute them."""

    mask: torch.Tensor
    box: torch.Tensor
    classification: torch.Tensor
    stop: torch.Tensor
    total: torch.Tensor
    assignment: AssignmentMatrix

    def scalars(self) -> dict[str, float]:
        return {
            "loss_mask": float(self.mask),
            "loss_box": float(self.box),
            "loss_class": float(self.classification),
            "loss_stop": float(self.stop),
            "loss_total": float(self.total),
        }


def soft_iou_loss(pred_mask: torch.Tensor, gt_mask, eps: float = EPS) -> torch.Tensor:
    """1 - <p, y> / (|p|_1 + |y|_1 - <p, y>), zero when both masks are empty."""
    gt = torch.as_tensor(np.asarray(gt_mask), dtype=pred_mask.dtype, device=pred_mask.device)
    inter = (pred_mask * gt).sum()
    denom = pred_mask.sum() + gt.sum() - inter
    if float(denom) < eps:  # degenerate: both masks identically zero
        return torch.zeros((), dtype=pred_mask.dtype, device=pred_mask.device)
    return 1.0 - inter / denom


def cost_matrix(preds: PredictionSequence, gts: list[GroundTruthInstance]) -> np.ndarray:
    """Soft-IoU loss between every (prediction, ground truth) pair."""
    if len(preds) == 0 or len(gts) == 0:
        raise EmptyInputError("cost matrix needs at least one prediction and one ground truth")
    cost = np.empty((len(preds), len(gts)), dtype=np.float64)
    with torch.no_grad():
        for t, pred in enumerate(preds):
            mask = pred.mask.detach().double()
            for j, gt in enumerate(gts):
                cost[t, j] = float(soft_iou_loss(mask, gt.mask))
    return cost


def hungarian_match(cost) -> AssignmentMatrix:
    """Minimum-total-cost bipartite assignment; min(rows, cols) pairs matched."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        raise EmptyInputError("cannot match an empty cost matrix")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix entries must be finite")
    rows, cols = linear_sum_assignment(cost)
    delta = np.zeros(cost.shape, dtype=np.uint8)
    delta[rows, cols] = 1
    return AssignmentMatrix(delta)


def _gt_mask(gt: GroundTruthInstance, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(gt.mask, dtype=like.dtype, device=like.device)


def _zero(like: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=like.dtype, device=like.device)


def mask_loss(preds: PredictionSequence, gts: list[GroundTruthInstance],
              assignment: AssignmentMatrix) -> torch.Tensor:
    """Sum of soft-IoU losses over matched pairs; unmatched steps contribute
    neither loss nor gradient."""
    ref = preds[0].mask
    total = _zero(ref)
    for t, j in assignment.pairs:
        total = total + soft_iou_loss(preds[t].mask, _gt_mask(gts[j], ref))
    return total


def class_loss(preds: PredictionSequence, gts: list[GroundTruthInstance],
               assignment: AssignmentMatrix) -> torch.Tensor:
    """Mean cross entropy -log p[class] over matched pairs."""
    pairs = assignment.pairs
    if not pairs:
        return _zero(preds[0].class_probs)
    terms = [
        -torch.log(preds[t].class_probs[gts[j].class_id].clamp_min(EPS))
        for t, j in pairs
    ]
    return torch.stack(terms).mean()


def box_loss(preds: PredictionSequence, gts: list[GroundTruthInstance],
             assignment: AssignmentMatrix) -> torch.Tensor:
    """Mean squared error over matched pairs and the 4 box coordinates."""
    pairs = assignment.pairs
    if not pairs:
        return _zero(preds[0].box)
    ref = preds[0].box
    diffs = [
        preds[t].box - torch.as_tensor(gts[j].box, dtype=ref.dtype, device=ref.device)
        for t, j in pairs
    ]
    return torch.stack(diffs).pow(2).mean()


def stop_loss(stop_scores, num_instances: int) -> torch.Tensor:
    """Mean binary cross entropy against targets 1 at steps t <= n, 0 after."""
    scores = stop_scores if isinstance(stop_scores, torch.Tensor) else torch.stack(list(stop_scores))
    steps = torch.arange(1, scores.numel() + 1, device=scores.device)
    targets = (steps <= num_instances).to(scores.dtype)
    p = scores.clamp(EPS, 1.0 - EPS)
    return -(targets * torch.log(p) + (1.0 - targets) * torch.log(1.0 - p)).mean()


def total_loss(preds: PredictionSequence, gts: list[GroundTruthInstance],
               weights: LossWeights = LossWeights(),
               assignment: AssignmentMatrix | None = None) -> LossBreakdown:
    """Full objective over one image.

    The assignment is solved once per call (unless injected, e.g. to hold it
    fixed while probing gradients) and shared by every term. With no ground
    truth only the stop term is meaningful; matched terms are zero.
    """
    if len(preds) == 0:
        raise EmptyInputError("need at least one prediction")
    n = len(gts)
    if n == 0:
        assignment = AssignmentMatrix(np.zeros((len(preds), 0), dtype=np.uint8))
    elif assignment is None:
        assignment = hungarian_match(cost_matrix(preds, gts))

    active = weights.active_terms
    ref = preds[0].mask

    def term(name, fn):
        if name in active:
            return fn()
        with torch.no_grad():  # inactive terms are reported but never trained
            return fn()

    l_mask = term("mask", lambda: mask_loss(preds, gts, assignment))
    l_box = term("box", lambda: box_loss(preds, gts, assignment))
    l_class = term("class", lambda: class_loss(preds, gts, assignment))
    l_stop = term("stop", lambda: stop_loss(preds.stop_scores(), n))

    total = _zero(ref)
    if "mask" in active:
        total = total + l_mask
    if "box" in active:
        total = total + weights.box_weight * l_box
    if "class" in active:
        total = total + weights.class_weight * l_class
    if "stop" in active:
        total = total + weights.stop_weight * l_stop

    return LossBreakdown(l_mask, l_box, l_class, l_stop, total, assignment)
