"""Checkpoint archive shared by the encoder, decoder and trainer.

A checkpoint is a single zip archive::

    manifest.json            schema version, model configs, shape manifest,
                             optional optimizer step counts and training state
    params/<name>.bin        raw little-endian float32 parameter tensors,
                             <name> as reported by Module.named_parameters()
    opt/<name>.<slot>.bin    raw little-endian float32 optimizer slots
                             (exp_avg, exp_avg_sq per parameter)

Float32 round-trips are exact, which is what makes run-vs-resume training
byte-identical.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .core import IoError
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .model import RecurrentSegmenter

SCHEMA_VERSION = 1
OPTIMIZER_SLOTS = ("exp_avg", "exp_avg_sq")


@dataclass
class CheckpointBundle:
    model: RecurrentSegmenter
    manifest: dict
    optimizer_state: dict | None  # name -> {"step": float, "<slot>": tensor}
    training_state: dict | None


def _raw(tensor: torch.Tensor) -> bytes:
    arr = tensor.detach().cpu().contiguous().to(torch.float32).numpy()
    return arr.astype("<f4", copy=False).tobytes()


def save_checkpoint(path, model: RecurrentSegmenter, optimizer=None,
                    training_state: dict | None = None) -> None:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "encoder": asdict(model.encoder_cfg),
        "decoder": asdict(model.decoder_cfg),
        "params": {name: list(p.shape) for name, p in model.named_parameters()},
        "training": training_state,
        "optimizer": None,
    }

    opt_blobs = {}
    if optimizer is not None:
        steps = {}
        for name, p in model.named_parameters():
            state = optimizer.state.get(p)
            if not state:
                continue
            steps[name] = float(state["step"])
            for slot in OPTIMIZER_SLOTS:
                opt_blobs[f"opt/{name}.{slot}.bin"] = _raw(state[slot])
        manifest["optimizer"] = {"steps": steps, "slots": list(OPTIMIZER_SLOTS)}

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        for name, p in model.named_parameters():
            zf.writestr(f"params/{name}.bin", _raw(p))
        for arc, blob in opt_blobs.items():
            zf.writestr(arc, blob)


def _read_tensor(zf: zipfile.ZipFile, arcname: str, shape, path) -> torch.Tensor:
    try:
        blob = zf.read(arcname)
    except KeyError:
        raise IoError(f"checkpoint member missing: {arcname}", path) from None
    arr = np.frombuffer(blob, dtype="<f4")
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise IoError(f"checkpoint member {arcname} has {arr.size} values, "
                      f"expected {expected}", path)
    return torch.from_numpy(arr.copy()).reshape(shape)


def load_checkpoint(path) -> CheckpointBundle:
    path = Path(path)
    if not path.exists():
        raise IoError("checkpoint file does not exist", path)
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise IoError(f"corrupt checkpoint archive ({exc})", path) from None
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except (KeyError, json.JSONDecodeError) as exc:
            raise IoError(f"corrupt checkpoint manifest ({exc})", path) from None
        version = manifest.get("schema_version")
        if version != SCHEMA_VERSION:
            raise IoError(
                f"checkpoint schema version {version} unsupported "
                f"(expected {SCHEMA_VERSION})", path,
            )

        encoder_cfg = EncoderConfig(**manifest["encoder"])
        decoder_cfg = DecoderConfig(**manifest["decoder"])
        # Build without disturbing the caller's global RNG stream.
        with torch.random.fork_rng():
            torch.manual_seed(0)
            model = RecurrentSegmenter(encoder_cfg, decoder_cfg)

        params = dict(model.named_parameters())
        if set(params) != set(manifest["params"]):
            raise IoError("checkpoint parameter names do not match the model", path)
        with torch.no_grad():
            for name, shape in manifest["params"].items():
                params[name].copy_(_read_tensor(zf, f"params/{name}.bin", shape, path))

        optimizer_state = None
        if manifest.get("optimizer"):
            optimizer_state = {}
            steps = manifest["optimizer"]["steps"]
            for name, step in steps.items():
                entry = {"step": float(step)}
                for slot in manifest["optimizer"]["slots"]:
                    entry[slot] = _read_tensor(
                        zf, f"opt/{name}.{slot}.bin", manifest["params"][name], path
                    )
                optimizer_state[name] = entry

    return CheckpointBundle(model, manifest, optimizer_state, manifest.get("training"))


def restore_optimizer(optimizer, model: RecurrentSegmenter, optimizer_state: dict) -> None:
    """Install saved Adam slots onto a freshly built optimizer."""
    by_name = dict(model.named_parameters())
    for name, entry in optimizer_state.items():
        p = by_name[name]
        state = {"step": torch.tensor(entry["step"])}
        for slot in OPTIMIZER_SLOTS:
            state[slot] = entry[slot].clone()
        optimizer.state[p] = state
