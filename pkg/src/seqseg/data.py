"""Synthetic shapes dataset: generation, on-disk layout, resizing.

Images contain 1..n colored shapes (circle / square / triangle) drawn
back-to-front on a black background; each ground-truth mask is the visible
(unoccluded) region. Generation is a pure function of (spec, seed).

On disk a dataset is::

    images/NNNN.png          8-bit RGB
    masks/NNNN_k.png         8-bit single channel, 0/255
    annotations/NNNN.json    class ids, boxes, mask file references
    manifest.json            split name -> list of record ids
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import (
    GenerationError,
    GroundTruthInstance,
    ImageSample,
    IoError,
    box_from_mask,
)

CLASS_NAMES = ("circle", "square", "triangle")

MIN_VISIBLE_PIXELS = 4
MAX_REJECTIONS = 1000
_MIN_COLOR_DISTANCE = 48  # L-inf distance between object colors (and from black)


@dataclass(frozen=True)
class ShapesSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 4
    min_size: float = 0.2   # shape extent as a fraction of min(height, width)
    max_size: float = 0.5
    max_occlusion: float = 0.5  # cap on the hidden fraction of any shape
    seed: int = 0

    def __post_init__(self):
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("object count range must satisfy 1 <= min <= max")
        if not (0.0 < self.min_size <= self.max_size < 1.0):
            raise ValueError("size fractions must lie in (0, 1)")
        if not (0.0 <= self.max_occlusion < 1.0):
            raise ValueError("max_occlusion must lie in [0, 1)")
        if not (1 <= self.num_classes <= len(CLASS_NAMES)):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")


@dataclass
class DatasetRecord:
    image: ImageSample
    instances: list[GroundTruthInstance] = field(default_factory=list)

    def __eq__(self, other):
        return (
            isinstance(other, DatasetRecord)
            and self.image == other.image
            and self.instances == other.instances
        )


def _raster_shape(kind: str, h: int, w: int, cy: float, cx: float, half: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= half ** 2
    if kind == "square":
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= half
    if kind == "triangle":  # isoceles, apex up, inscribed in the 2*half box
        top = cy - half
        within_rows = (yy >= top) & (yy <= cy + half)
        return within_rows & (np.abs(xx - cx) <= (yy - top) / 2.0)
    raise ValueError(f"unknown shape kind {kind!r}")


def _sample_colors(rng: np.random.Generator, count: int) -> np.ndarray:
    """Distinct bright colors, well separated from each other and from black."""
    colors: list[np.ndarray] = []
    for _ in range(count):
        for _attempt in range(MAX_REJECTIONS):
            c = rng.integers(0, 256, size=3)
            if c.max() < 2 * _MIN_COLOR_DISTANCE:
                continue
            if all(np.abs(c - prev).max() >= _MIN_COLOR_DISTANCE for prev in colors):
                colors.append(c)
                break
        else:
            raise GenerationError("could not sample distinct colors")
    return np.stack(colors)


def generate_sample(spec: ShapesSpec, rng: np.random.Generator) -> DatasetRecord:
    """Draw one record: shapes back-to-front, visible-region ground truth.

    A placement is rejected (and resampled) whenever it would push any shape's
    hidden fraction over the occlusion cap or any visible region below
    MIN_VISIBLE_PIXELS; MAX_REJECTIONS consecutive rejections abort.
    """
    h, w = spec.height, spec.width
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    colors = _sample_colors(rng, n)

    extent_base = min(h, w)
    cover = np.full((h, w), -1, dtype=np.int32)  # topmost shape index per pixel
    full_masks: list[np.ndarray] = []
    class_ids: list[int] = []
    rejections = 0
    while len(full_masks) < n:
        kind_id = int(rng.integers(0, spec.num_classes))
        size = rng.uniform(spec.min_size, spec.max_size) * extent_base
        half = size / 2.0
        cy = rng.uniform(half, h - half)
        cx = rng.uniform(half, w - half)
        mask = _raster_shape(CLASS_NAMES[kind_id], h, w, cy, cx, half)

        ok = mask.sum() >= MIN_VISIBLE_PIXELS
        if ok:
            candidate = cover.copy()
            candidate[mask] = len(full_masks)
            for j, full in enumerate(full_masks):
                visible = int((candidate == j).sum())
                if visible < MIN_VISIBLE_PIXELS:
                    ok = False
                    break
                if 1.0 - visible / full.sum() > spec.max_occlusion:
                    ok = False
                    break
        if not ok:
            rejections += 1
            if rejections >= MAX_REJECTIONS:
                raise GenerationError(
                    f"{MAX_REJECTIONS} consecutive rejections; spec too constrained"
                )
            continue

        rejections = 0
        cover[mask] = len(full_masks)
        full_masks.append(mask)
        class_ids.append(kind_id)

    pixels = np.zeros((h, w, 3), dtype=np.float32)
    instances = []
    for j in range(n):
        visible = cover == j
        pixels[visible] = colors[j].astype(np.float32) / 255.0
        instances.append(
            GroundTruthInstance(mask=visible, box=box_from_mask(visible), class_id=class_ids[j])
        )
    return DatasetRecord(ImageSample(pixels), instances)


def generate_dataset(spec: ShapesSpec, count: int) -> list[DatasetRecord]:
    """Deterministic dataset: record i uses an rng derived from (spec.seed, i)."""
    return [
        generate_sample(spec, np.random.default_rng(np.random.SeedSequence([spec.seed, i])))
        for i in range(count)
    ]


# ---------------------------------------------------------------------------
# disk IO

def _record_id(index: int) -> str:
    return f"{index:04d}"


def save_dataset(path, splits) -> None:
    """Write records (a list, or a dict split -> list) plus the manifest."""
    if isinstance(splits, list):
        splits = {"train": splits}
    root = Path(path)
    for sub in ("images", "masks", "annotations"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    manifest: dict[str, list[str]] = {}
    index = 0
    for split, records in splits.items():
        ids = []
        for record in records:
            rid = _record_id(index)
            index += 1
            ids.append(rid)
            arr = np.round(record.image.pixels * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(root / "images" / f"{rid}.png")
            entries = []
            for k, inst in enumerate(record.instances):
                mask_name = f"{rid}_{k}.png"
                Image.fromarray(inst.mask.astype(np.uint8) * 255).save(root / "masks" / mask_name)
                entries.append(
                    {"class_id": inst.class_id, "box": list(inst.box), "mask": f"masks/{mask_name}"}
                )
            ann = {"image": f"images/{rid}.png", "instances": entries}
            (root / "annotations" / f"{rid}.json").write_text(json.dumps(ann, indent=1))
        manifest[split] = ids
    (root / "manifest.json").write_text(json.dumps({"splits": manifest}, indent=1))


def _load_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise IoError("missing image file", path) from None
    except OSError as exc:
        raise IoError(f"corrupt image file ({exc})", path) from None


def _load_record(root: Path, rid: str) -> DatasetRecord:
    ann_path = root / "annotations" / f"{rid}.json"
    try:
        ann = json.loads(ann_path.read_text())
    except FileNotFoundError:
        raise IoError("missing annotation file", ann_path) from None
    except json.JSONDecodeError as exc:
        raise IoError(f"corrupt annotation file ({exc})", ann_path) from None

    pixels = _load_image(root / ann["image"]).astype(np.float32) / 255.0
    instances = []
    for entry in ann["instances"]:
        mask_path = root / entry["mask"]
        try:
            with Image.open(mask_path) as im:
                mask = np.asarray(im.convert("L")) >= 128
        except FileNotFoundError:
            raise IoError("missing mask file", mask_path) from None
        except OSError as exc:
            raise IoError(f"corrupt mask file ({exc})", mask_path) from None
        instances.append(
            GroundTruthInstance(mask=mask, box=tuple(entry["box"]), class_id=entry["class_id"])
        )
    return DatasetRecord(ImageSample(pixels), instances)


def load_dataset(path, split: str | None = None) -> list[DatasetRecord]:
    """Load every record (manifest order), or one split. Empty dir -> []."""
    root = Path(path)
    if not root.is_dir():
        raise IoError("dataset directory does not exist", root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        return []
    try:
        manifest = json.loads(manifest_path.read_text())["splits"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise IoError(f"corrupt manifest ({exc})", manifest_path) from None
    if split is not None:
        if split not in manifest:
            raise IoError(f"split {split!r} not in manifest", manifest_path)
        ids = manifest[split]
    else:
        ids = [rid for split_ids in manifest.values() for rid in split_ids]
    return [_load_record(root, rid) for rid in ids]


def resize_record(record: DatasetRecord, height: int, width: int) -> DatasetRecord:
    """Bilinear image / nearest mask resize; boxes recomputed, emptied
    instances dropped."""
    image = torch.from_numpy(record.image.pixels).permute(2, 0, 1).unsqueeze(0)
    resized = F.interpolate(image, size=(height, width), mode="bilinear", align_corners=False)
    pixels = resized.squeeze(0).permute(1, 2, 0).clamp(0.0, 1.0).numpy()

    instances = []
    for inst in record.instances:
        mask_t = torch.from_numpy(inst.mask.astype(np.float32))[None, None]
        mask = F.interpolate(mask_t, size=(height, width), mode="nearest")[0, 0].numpy() >= 0.5
        if not mask.any():
            continue
        instances.append(replace(inst, mask=mask, box=box_from_mask(mask)))
    return DatasetRecord(ImageSample(pixels), instances)
