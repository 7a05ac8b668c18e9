"""Training loop: curriculum over object count, staged losses, checkpoints.

Determinism contract: everything stochastic is derived from (seed, epoch), so
a fixed seed reproduces the loss stream byte for byte, and resuming from a
checkpoint continues exactly where the uninterrupted run would have been.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from .core import EmptyInputError, NonFiniteLossError
from .data import DatasetRecord
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .model import RecurrentSegmenter, batch_predictions, build_model
from .objective import TERMS, LossWeights, total_loss


@dataclass(frozen=True)
class CurriculumState:
    """Object-count curriculum: the cap advances by one when validation stalls."""

    max_objects: int = 2
    patience: int = 5
    plateau_eps: float = 1e-3
    best_val: float = math.inf
    epochs_since_best: int = 0

    def __post_init__(self):
        if self.max_objects < 2:
            raise ValueError("max_objects starts at 2 or above")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


def plateau_check(state: CurriculumState, val_loss: float) -> tuple[CurriculumState, bool]:
    """Advance after `patience` consecutive non-improving epochs.

    An epoch improves iff val_loss <= best * (1 - plateau_eps); the boundary
    counts as improvement. On advance the epoch counter resets but the best
    value is kept, so a flat loss advances at exactly `patience` intervals.
    """
    if not math.isfinite(val_loss):
        raise ValueError(f"validation loss must be finite, got {val_loss}")
    if val_loss <= state.best_val * (1.0 - state.plateau_eps):
        return replace(state, best_val=val_loss, epochs_since_best=0), False
    stalled = state.epochs_since_best + 1
    if stalled >= state.patience:
        return replace(state, max_objects=state.max_objects + 1, epochs_since_best=0), True
    return replace(state, epochs_since_best=stalled), False


def curriculum_filter(record: DatasetRecord, max_objects: int) -> DatasetRecord:
    """Keep at most `max_objects` targets, largest visible area first, in the
    record's original order."""
    if max_objects < 2:
        raise ValueError("max_objects must be >= 2")
    if len(record.instances) <= max_objects:
        return record
    by_area = sorted(range(len(record.instances)),
                     key=lambda i: (-record.instances[i].area, i))
    keep = sorted(by_area[:max_objects])
    return DatasetRecord(record.image, [record.instances[i] for i in keep])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    curriculum_start: int = 2
    patience: int = 5
    plateau_eps: float = 1e-3
    box_weight: float = 1.0
    class_weight: float = 1.0
    stop_weight: float = 1.0
    # term -> first epoch it contributes gradient; default trains all at once
    stage_epochs: dict = field(default_factory=dict)
    stop_threshold: float = 0.5
    checkpoint_every: int = 0  # extra per-epoch checkpoints; 0 = final only

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.stop_threshold) <= 0:
            raise ValueError("learning_rate, batch_size, stop_threshold must be positive")
        if self.epochs < 0 or self.checkpoint_every < 0:
            raise ValueError("epochs and checkpoint_every must be nonnegative")
        unknown = set(self.stage_epochs) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown staged terms: {sorted(unknown)}")

    def active_terms(self, epoch: int) -> frozenset:
        return frozenset(t for t in TERMS if epoch >= self.stage_epochs.get(t, 0))

    def loss_weights(self, epoch: int) -> LossWeights:
        return LossWeights(self.box_weight, self.class_weight, self.stop_weight,
                           self.active_terms(epoch))


def _stack_images(records: list[DatasetRecord], dtype) -> torch.Tensor:
    return torch.stack(
        [torch.from_numpy(r.image.pixels).permute(2, 0, 1).to(dtype) for r in records]
    )


def _batch_loss(model, records, weights, unroll_steps):
    dtype = next(model.parameters()).dtype
    outputs = model.rollout(_stack_images(records, dtype), unroll_steps)
    sums = dict.fromkeys(("mask", "box", "class", "stop", "total"), 0.0)
    total = None
    for i, record in enumerate(records):
        breakdown = total_loss(batch_predictions(outputs, i), record.instances, weights)
        total = breakdown.total if total is None else total + breakdown.total
        sums["mask"] += float(breakdown.mask)
        sums["box"] += float(breakdown.box)
        sums["class"] += float(breakdown.classification)
        sums["stop"] += float(breakdown.stop)
        sums["total"] += float(breakdown.total)
    total = total / len(records)
    means = {k: v / len(records) for k, v in sums.items()}
    return total, means


def train_step(model: RecurrentSegmenter, optimizer, records: list[DatasetRecord],
               weights: LossWeights, unroll_steps: int) -> dict[str, float]:
    """One gradient step on a batch; returns the per-term batch means."""
    if not records:
        raise EmptyInputError("training batch is empty")
    total, means = _batch_loss(model, records, weights, unroll_steps)
    for term, value in means.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(term, value)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return means


@torch.no_grad()
def _validation_loss(model, records, weights, unroll_steps) -> float:
    _, means = _batch_loss(model, records, weights, unroll_steps)
    return means["total"]


@dataclass
class FitResult:
    model: RecurrentSegmenter
    checkpoint_path: Path
    log_path: Path
    log_rows: list[dict]


def fit(train_records: list[DatasetRecord], val_records: list[DatasetRecord],
        cfg: TrainConfig, out_dir,
        encoder_cfg: EncoderConfig | None = None,
        decoder_cfg: DecoderConfig | None = None,
        resume_from=None) -> FitResult:
    """Run the curriculum training loop, writing checkpoints and an NDJSON log.

    The log carries one row per epoch with per-term train means, validation
    loss, curriculum level and the active term set; rows contain no clocks or
    paths so identical seeds give byte-identical logs.
    """
    if not train_records or not val_records:
        raise EmptyInputError("need nonempty train and validation sets")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        bundle = load_checkpoint(resume_from)
        if bundle.training_state is None:
            raise ValueError("checkpoint carries no training state; cannot resume")
        model = bundle.model
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        if bundle.optimizer_state:
            restore_optimizer(optimizer, model, bundle.optimizer_state)
        saved = bundle.training_state
        start_epoch = saved["next_epoch"]
        curriculum = CurriculumState(**saved["curriculum"])
    else:
        model = build_model(encoder_cfg or EncoderConfig(),
                            decoder_cfg or DecoderConfig(), seed=cfg.seed)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        start_epoch = 0
        curriculum = CurriculumState(
            max_objects=max(2, cfg.curriculum_start),
            patience=cfg.patience, plateau_eps=cfg.plateau_eps,
        )

    log_path = out_dir / "train_log.ndjson"
    mode = "a" if resume_from is not None else "w"
    rows: list[dict] = []
    with open(log_path, mode) as log:
        for epoch in range(start_epoch, cfg.epochs):
            weights = cfg.loss_weights(epoch)
            level = curriculum.max_objects
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
            order = rng.permutation(len(train_records))

            epoch_sums = dict.fromkeys(("mask", "box", "class", "stop", "total"), 0.0)
            num_batches = 0
            for lo in range(0, len(order), cfg.batch_size):
                batch = [
                    curriculum_filter(train_records[i], level)
                    for i in order[lo:lo + cfg.batch_size]
                ]
                means = train_step(model, optimizer, batch, weights, unroll_steps=level)
                for k, v in means.items():
                    epoch_sums[k] += v
                num_batches += 1

            val_batch = [curriculum_filter(r, level) for r in val_records]
            val = _validation_loss(model, val_batch, weights, unroll_steps=level)
            curriculum, advanced = plateau_check(curriculum, val)

            row = {
                "epoch": epoch,
                "curriculum_max_objects": level,
                "active_terms": sorted(weights.active_terms),
                "val_loss": val,
                "curriculum_advanced": advanced,
            }
            row.update({f"train_{k}": v / num_batches for k, v in epoch_sums.items()})
            rows.append(row)
            log.write(json.dumps(row) + "\n")
            log.flush()

            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_epoch_{epoch:04d}.ckpt",
                                model, optimizer, _training_state(epoch + 1, curriculum, cfg))

    final_epoch = max(start_epoch, cfg.epochs)
    final_path = out_dir / "checkpoint.ckpt"
    save_checkpoint(final_path, model, optimizer,
                    _training_state(final_epoch, curriculum, cfg))
    return FitResult(model, final_path, log_path, rows)


def _training_state(next_epoch: int, curriculum: CurriculumState, cfg: TrainConfig) -> dict:
    return {
        "next_epoch": next_epoch,
        "seed": cfg.seed,
        "curriculum": {
            "max_objects": curriculum.max_objects,
            "patience": curriculum.patience,
            "plateau_eps": curriculum.plateau_eps,
            "best_val": curriculum.best_val,
            "epochs_since_best": curriculum.epochs_since_best,
        },
    }
