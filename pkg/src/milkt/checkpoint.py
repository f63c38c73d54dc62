"""Checkpoint directories: ``manifest.json`` plus one MILB file per tensor."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import milb

MANIFEST = "manifest.json"


class CheckpointError(ValueError):
    """A checkpoint directory is missing pieces or inconsistent."""


def save(directory: str | Path, kind: str, meta: dict, tensors: list[tuple[str, np.ndarray]]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for name, arr in tensors:
        fname = f"{name}.milb"
        milb.write(directory / fname, arr)
        files.append({"name": name, "file": fname})
    manifest = {"kind": kind, **meta, "tensors": files}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load(directory: str | Path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise CheckpointError(f"{directory}: no {MANIFEST}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: invalid JSON ({exc})") from exc
    if manifest.get("kind") != kind:
        raise CheckpointError(f"{directory}: expected a {kind!r} checkpoint, found {manifest.get('kind')!r}")
    tensors = {}
    for entry in manifest.get("tensors", []):
        fpath = directory / entry["file"]
        if not fpath.is_file():
            raise CheckpointError(f"{directory}: missing tensor file {entry['file']}")
        tensors[entry["name"]] = milb.read(fpath, name=entry["name"])
    return manifest, tensors
