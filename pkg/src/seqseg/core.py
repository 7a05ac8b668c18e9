"""Shared domain types, exceptions and deterministic mask utilities.

Conventions used everywhere in the package:
  * masks are ``(h, w)`` arrays, row-major (row = y, col = x)
  * boxes are ``(x_min, y_min, x_max, y_max)`` normalized by image width/height,
    with an exclusive upper edge, so a full-image mask maps to ``(0, 0, 1, 1)``
  * class probabilities are a length-``C`` simplex vector
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


class EmptyMaskError(ValueError):
    """Raised when an operation requires at least one foreground pixel."""


class ShapeError(ValueError):
    """Raised on tensor shape / divisibility contract violations."""


class EmptyInputError(ValueError):
    """Raised when a nonempty collection or matrix is required."""


class GenerationError(RuntimeError):
    """Raised when sample synthesis cannot satisfy its constraints."""


class IoError(RuntimeError):
    """Dataset / checkpoint IO failure. Carries the offending path."""

    def __init__(self, message: str, path=None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = path


class NonFiniteLossError(RuntimeError):
    """Raised by the trainer when a loss term goes NaN/inf. Carries the term name."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term
        self.value = value


@dataclass
class ImageSample:
    """An RGB image with values in [0, 1], shaped (h, w, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"expected (h, w, 3) pixels, got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        return isinstance(other, ImageSample) and np.array_equal(self.pixels, other.pixels)


@dataclass
class GroundTruthInstance:
    """One annotated object: visible-region binary mask, tight box, class id."""

    mask: np.ndarray
    box: tuple[float, float, float, float]
    class_id: int

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.box = tuple(float(v) for v in self.box)
        self.class_id = int(self.class_id)
        if self.mask.ndim != 2:
            raise ShapeError(f"expected (h, w) mask, got {self.mask.shape}")
        if not self.mask.any():
            raise EmptyMaskError("ground-truth mask has no foreground pixels")

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other):
        return (
            isinstance(other, GroundTruthInstance)
            and np.array_equal(self.mask, other.mask)
            and self.box == other.box
            and self.class_id == other.class_id
        )


@dataclass
class InstancePrediction:
    """One decoder time step: soft mask, box, class distribution, stop score.

    Fields are torch tensors so that losses can differentiate through them;
    the ``*_array`` helpers give detached numpy views for evaluation code.
    """

    mask: torch.Tensor        # (h, w) in [0, 1]
    box: torch.Tensor         # (4,) in [0, 1]
    class_probs: torch.Tensor  # (C,), sums to 1
    stop_score: torch.Tensor   # scalar in [0, 1]

    def mask_array(self) -> np.ndarray:
        return self.mask.detach().cpu().numpy()

    def box_array(self) -> np.ndarray:
        return self.box.detach().cpu().numpy()

    def class_array(self) -> np.ndarray:
        return self.class_probs.detach().cpu().numpy()

    @property
    def class_id(self) -> int:
        """Predicted category (argmax of the class distribution)."""
        return int(self.class_probs.detach().argmax().item())

    @property
    def score(self) -> float:
        """Ranking confidence: stop score times max class probability."""
        return float(self.stop_score.detach().item()) * float(self.class_probs.detach().max().item())


@dataclass
class PredictionSequence:
    """Ordered decoder output for one image. Emission order is never re-sorted.

    Training sequences always have at least one step; inference may retain an
    empty prefix when the very first stop score falls below the threshold.
    """

    steps: list[InstancePrediction] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def __getitem__(self, i) -> InstancePrediction:
        return self.steps[i]

    def __iter__(self):
        return iter(self.steps)

    def masks(self) -> torch.Tensor:
        return torch.stack([s.mask for s in self.steps])

    def boxes(self) -> torch.Tensor:
        return torch.stack([s.box for s in self.steps])

    def class_probs(self) -> torch.Tensor:
        return torch.stack([s.class_probs for s in self.steps])

    def stop_scores(self) -> torch.Tensor:
        return torch.stack([s.stop_score for s in self.steps])


@dataclass
class AssignmentMatrix:
    """Binary matching between predictions (rows) and ground truth (cols)."""

    delta: np.ndarray

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.uint8)
        if self.delta.ndim != 2:
            raise ShapeError(f"expected 2-d assignment, got {self.delta.shape}")
        n_hat, n = self.delta.shape
        if (self.delta.sum(axis=1) > 1).any() or (self.delta.sum(axis=0) > 1).any():
            raise ValueError("assignment rows/columns must sum to at most 1")
        if int(self.delta.sum()) != min(n_hat, n):
            raise ValueError("assignment must contain exactly min(n_hat, n) matches")

    @property
    def pairs(self) -> list[tuple[int, int]]:
        """Matched (prediction, ground-truth) index pairs, row-ordered."""
        rows, cols = np.nonzero(self.delta)
        return list(zip(rows.tolist(), cols.tolist()))

    def matched_rows(self) -> set[int]:
        return {r for r, _ in self.pairs}


def box_from_mask(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Tight normalized box of a binary mask, exclusive upper edge."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("cannot compute a box for an empty mask")
    h, w = mask.shape
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return (cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h)


def center_of_mass(mask: np.ndarray) -> tuple[float, float]:
    """Mean (row, col) over the foreground pixels of a binary mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("cannot compute a center for an empty mask")
    rows, cols = np.nonzero(mask)
    return (float(rows.mean()), float(cols.mean()))


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    """Threshold a soft mask; values >= threshold become foreground."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return np.asarray(mask) >= threshold
