"""Checkpoint directories: ``manifest.json`` plus one little-endian float32 blob per parameter."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import config_hash, from_dict
from .model import CrossModalModel

MANIFEST = "manifest.json"


def save_model(model: CrossModalModel, directory: str | Path, config: dict, step: int, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, tensor in model.state_dict().items():
        fname = f"{name}.bin"
        arr = tensor.detach().cpu().numpy().astype("<f4")
        (directory / fname).write_bytes(arr.tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {
        "format": "crossmost-ckpt/1",
        "dtype": "float32-le",
        "step": int(step),
        "config_hash": config_hash(config),
        "config": config,
        "params": entries,
    }
    if extra:
        manifest.update(extra)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_model(directory: str | Path, model: CrossModalModel | None = None) -> CrossModalModel:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if model is None:
        model = CrossModalModel.from_config(from_dict(manifest["config"]))
    state = {}
    for entry in manifest["params"]:
        raw = np.frombuffer((directory / entry["file"]).read_bytes(), dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(raw.astype(np.float32))
    model.load_state_dict(state)
    return model


def save_pair(student, teacher, directory: str | Path, config: dict, step: int, extra: dict | None = None) -> Path:
    """Student and teacher go to separate sub-directories of ``directory``."""
    directory = Path(directory)
    save_model(student, directory / "student", config, step, extra)
    save_model(teacher, directory / "teacher", config, step, extra)
    return directory


def resolve_model_dir(path: str | Path, which: str = "student") -> Path:
    """Accept either a pair directory or a single-model directory."""
    path = Path(path)
    if (path / MANIFEST).exists():
        return path
    if (path / which / MANIFEST).exists():
        return path / which
    raise FileNotFoundError(f"no checkpoint found at {path}")
