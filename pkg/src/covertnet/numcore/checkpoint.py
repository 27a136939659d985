"""Parameter checkpoints: a JSON manifest plus one little-endian float64 file per tensor."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def save_params(directory: str | Path, params: dict[str, np.ndarray], seed: int | None = None,
                step: int | None = None, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, value) in enumerate(params.items()):
        fname = f"param_{i:03d}.bin"
        np.ascontiguousarray(value, dtype="<f8").tofile(directory / fname)
        entries.append({"name": name, "shape": list(value.shape), "file": fname})
    manifest = {"params": entries, "seed": seed, "step": step, "dtype": "<f8"}
    if extra:
        manifest.update(extra)
    (directory / "checkpoint.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_params(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "checkpoint.json").read_text())
    params = {}
    for entry in manifest["params"]:
        flat = np.fromfile(directory / entry["file"], dtype="<f8")
        params[entry["name"]] = flat.reshape(entry["shape"]).astype(float)
    return params, manifest
