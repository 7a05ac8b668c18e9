"""Raster outputs: per-step overlays and analysis bar charts."""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np
from PIL import Image, ImageDraw

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .analysis import FN_SIZE_EDGES
from .core import binarize, center_of_mass

_OVERLAY_COLORS = np.array(
    [(230, 57, 70), (42, 157, 143), (69, 123, 157), (244, 162, 97),
     (142, 68, 173), (38, 70, 83), (231, 111, 81), (33, 158, 188)],
    dtype=np.float32,
)


def sequence_overlay(image_pixels: np.ndarray, seq, mask_threshold: float = 0.5) -> Image.Image:
    """Tint each predicted mask and stamp its 1-based step number at its center."""
    canvas = (np.asarray(image_pixels, dtype=np.float32) * 255.0).copy()
    draw_targets = []
    for t, pred in enumerate(seq):
        mask = binarize(pred.mask_array(), mask_threshold)
        if not mask.any():
            continue
        color = _OVERLAY_COLORS[t % len(_OVERLAY_COLORS)]
        canvas[mask] = 0.5 * canvas[mask] + 0.5 * color
        draw_targets.append((t + 1, center_of_mass(mask)))
    img = Image.fromarray(np.clip(np.round(canvas), 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for step, (row, col) in draw_targets:
        draw.text((col, row), str(step), fill=(255, 255, 255), anchor="mm")
    return img


def save_mask_rasters(out_dir, seq, mask_threshold: float = 0.5) -> list[Path]:
    """Write each step's binarized mask as an 8-bit raster; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, pred in enumerate(seq):
        mask = binarize(pred.mask_array(), mask_threshold)
        path = out_dir / f"mask_{t:02d}.png"
        Image.fromarray(mask.astype(np.uint8) * 255).save(path)
        paths.append(path)
    return paths


def _bar_chart(path, labels, values, title, ylabel):
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(range(len(values)), values, color="#457b9d")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_title(title, fontsize=9)
    ax.set_ylabel(ylabel, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_report_charts(out_dir, report) -> list[Path]:
    """Bar charts for the FP taxonomy, FN sizes and IoU curves of a report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fp = report.fp_counts
    path = out_dir / "fp_categories.png"
    _bar_chart(path, list(fp), list(fp.values()), "False positive categories", "count")
    written.append(path)

    edges = [f"<={e * 100:g}%" for e in FN_SIZE_EDGES] + [f">{FN_SIZE_EDGES[-1] * 100:g}%"]
    path = out_dir / "fn_sizes.png"
    _bar_chart(path, edges, report.fn_size_histogram, "False negatives by object size", "count")
    written.append(path)

    if report.iou_vs_timestep:
        path = out_dir / "iou_vs_timestep.png"
        _bar_chart(path, [str(k) for k in report.iou_vs_timestep],
                   list(report.iou_vs_timestep.values()), "Mask IoU by time step", "mean IoU")
        written.append(path)

    if report.iou_vs_size:
        labels = [edges[int(k)] for k in report.iou_vs_size]
        path = out_dir / "iou_vs_size.png"
        _bar_chart(path, labels, list(report.iou_vs_size.values()),
                   "Mask IoU by object size", "mean IoU")
        written.append(path)

    if report.pair_directions:
        directions = ("r2l", "b2t", "l2s")
        pairs = sorted(report.pair_directions)
        fig, ax = plt.subplots(figsize=(7, 3.2))
        x = np.arange(len(pairs))
        for d, direction in enumerate(directions):
            frac = [
                report.pair_directions[p][direction] / max(1, report.pair_directions[p]["count"])
                for p in pairs
            ]
            ax.bar(x + (d - 1) * 0.27, frac, width=0.27, label=direction)
        ax.set_xticks(x)
        ax.set_xticklabels(pairs, rotation=45, ha="right", fontsize=7)
        ax.set_ylabel("fraction of pairs", fontsize=8)
        ax.set_title("Consecutive-pair ordering by class pair", fontsize=9)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / "pair_directions.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
