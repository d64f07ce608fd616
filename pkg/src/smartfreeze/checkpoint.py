"""Checkpoints: flat little-endian float64 dump plus a JSON text manifest
(name, shape, offset per tensor)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def save_checkpoint(prefix, tensors: dict[str, np.ndarray]):
    """Writes ``<prefix>.bin`` and ``<prefix>.manifest.json``."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    manifest = []
    offset = 0
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            fh.write(arr.tobytes())
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    prefix.with_suffix(".manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n"
    )


def load_checkpoint(prefix) -> dict[str, np.ndarray]:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".manifest.json").read_text())
    flat = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8")
    out = {}
    for entry in manifest:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = flat[entry["offset"] : entry["offset"] + size]
        out[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float64)
    return out


def params_to_tensors(params) -> dict[str, np.ndarray]:
    """Layer parameter list -> flat named-tensor dict (``layer03.W`` style)."""
    out = {}
    for i, p in enumerate(params):
        if p is None:
            continue
        for name, arr in p.items():
            out[f"layer{i:03d}.{name}"] = arr
    return out


def tensors_to_params(tensors: dict[str, np.ndarray], num_layers: int):
    params = [None] * num_layers
    for key, arr in tensors.items():
        layer, name = key.split(".")
        i = int(layer.removeprefix("layer"))
        if params[i] is None:
            params[i] = {}
        params[i][name] = arr.copy()
    return params
