"""Checkpoint storage: a JSON manifest plus one float64 blob per parameter set.

Layout of a checkpoint directory::

    manifest.json       {"format", "run_id", "param_sets": {set: {"blob", "params"}}, "state"}
    <set>.bin           little-endian float64, parameters concatenated in manifest order

Each ``params`` entry is ``{"name", "shape", "offset"}`` with ``offset``
counted in elements.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import MissingArtifactError, SpecError

FORMAT = "kggan-checkpoint/1"
_DTYPE = np.dtype("<f8")


def write_param_set(directory: Path, set_name: str, arrays: Mapping[str, np.ndarray]) -> dict:
    """Write one blob and return its manifest entry."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.reshape(-1))
        offset += arr.size
    blob = np.concatenate(chunks).astype(_DTYPE) if chunks else np.zeros(0, _DTYPE)
    fname = f"{set_name}.bin"
    (directory / fname).write_bytes(blob.tobytes())
    return {"blob": fname, "params": entries, "count": int(offset)}


def read_param_set(directory: Path, entry: Mapping[str, Any]) -> dict[str, np.ndarray]:
    path = directory / entry["blob"]
    if not path.exists():
        raise MissingArtifactError(f"checkpoint blob missing: {path}")
    flat = np.frombuffer(path.read_bytes(), dtype=_DTYPE)
    if flat.size != entry.get("count", flat.size):
        raise SpecError(f"{path}: expected {entry['count']} values, found {flat.size}")
    out = {}
    for p in entry["params"]:
        n = int(np.prod(p["shape"], dtype=np.int64))
        out[p["name"]] = flat[p["offset"]:p["offset"] + n].astype(np.float64).reshape(p["shape"])
    return out


def save_checkpoint(directory: str | Path, param_sets: Mapping[str, Mapping[str, np.ndarray]],
                    state: Mapping[str, Any] | None = None, run_id: str | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT,
        "run_id": run_id,
        "param_sets": {name: write_param_set(directory, name, arrays) for name, arrays in param_sets.items()},
        "state": dict(state or {}),
    }
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(directory / "manifest.json")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict[str, dict[str, np.ndarray]], dict[str, Any], dict]:
    """Return ``(param_sets, state, manifest)``."""
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise MissingArtifactError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise SpecError(f"{mpath}: unknown checkpoint format {manifest.get('format')!r}")
    sets = {name: read_param_set(directory, entry) for name, entry in manifest["param_sets"].items()}
    return sets, manifest.get("state", {}), manifest
