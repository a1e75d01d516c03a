"""Checkpoint directories: one CSV per array plus a JSON manifest.

Floats are written in shortest round-trip form, so a save/load cycle is the
identity and resumed runs continue bit-for-bit.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .numerics import load_matrix_csv, save_matrix_csv

MANIFEST = "manifest.json"
SCHEMA_VERSION = 1


def _filename(name):
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".csv"


def save_checkpoint(directory, arrays: dict, meta: dict, config_hash: str = ""):
    """Write ``arrays`` (name -> ndarray) and JSON-serializable ``meta``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    used = set()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float64)
        fname = _filename(name)
        if fname in used:
            raise ConfigError(f"array names collide on disk: {name!r}")
        used.add(fname)
        index[name] = {"file": fname, "shape": list(arr.shape)}
        rows = arr.shape[0] if arr.ndim >= 2 else 1
        flat = arr.reshape(rows, -1) if arr.size else np.zeros((0, 0))
        if arr.size:
            save_matrix_csv(flat, directory / fname)
        else:
            (directory / fname).write_text("")
    manifest = {"schema_version": SCHEMA_VERSION, "config_hash": config_hash,
                "arrays": index, "meta": meta}
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    tmp.replace(directory / MANIFEST)


def load_checkpoint(directory):
    """Return ``(arrays, meta, config_hash)``."""
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(path.read_text())
    arrays = {}
    for name, entry in manifest["arrays"].items():
        shape = tuple(entry["shape"])
        if int(np.prod(shape)) == 0:
            arrays[name] = np.zeros(shape)
            continue
        arrays[name] = load_matrix_csv(directory / entry["file"]).reshape(shape)
    return arrays, manifest["meta"], manifest.get("config_hash", "")


def pack(prefix, store: dict) -> dict:
    return {f"{prefix}/{k}": v for k, v in store.items()}


def unpack(prefix, arrays: dict) -> dict:
    head = prefix + "/"
    return {k[len(head):]: v for k, v in arrays.items() if k.startswith(head)}
