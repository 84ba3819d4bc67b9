"""Checkpoints: a JSON manifest plus one raw little-endian float blob.

The manifest lists (name, shape, dtype, offset) per tensor in the exact
blob order; offsets are validated to be cumulative and the blob size to
match, so a tampered manifest fails loudly naming the tensor. Saving the
result of a load reproduces the blob byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

MANIFEST_VERSION = 1
_MANIFEST_KEYS = {"version", "blob", "tensors"}
_TENSOR_KEYS = {"name", "shape", "dtype", "offset"}
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    """Manifest and blob disagree, or the manifest is malformed."""


def _blob_path(manifest_path: Path) -> Path:
    return manifest_path.with_name(manifest_path.name + ".blob")


def save_checkpoint(params, path: str | Path) -> None:
    """Write `path` (JSON manifest) and `path`.blob (raw tensor bytes)."""
    items = params.items() if hasattr(params, "items") else params
    tensors = {name: (t.data if isinstance(t, Tensor) else np.asarray(t)) for name, t in items}
    path = Path(path)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(tensors):
        arr = tensors[name]
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"version": MANIFEST_VERSION, "blob": _blob_path(path).name, "tensors": entries}
    _blob_path(path).write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1) + "\n")


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise CheckpointError(f"{path}: manifest must be a JSON object")
    unknown = set(manifest) - _MANIFEST_KEYS
    if unknown:
        raise CheckpointError(f"{path}: unknown manifest fields {sorted(unknown)}")
    if manifest.get("version") != MANIFEST_VERSION:
        raise CheckpointError(f"{path}: unsupported manifest version {manifest.get('version')}")
    blob_file = path.with_name(manifest["blob"])
    if not blob_file.is_file():
        raise FileNotFoundError(f"checkpoint blob not found: {blob_file}")
    blob = blob_file.read_bytes()

    out: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["tensors"]:
        if not isinstance(entry, dict):
            raise CheckpointError(f"{path}: tensor entries must be objects")
        unknown = set(entry) - _TENSOR_KEYS
        if unknown:
            raise CheckpointError(f"{path}: unknown tensor fields {sorted(unknown)} in entry {entry.get('name')}")
        name = entry["name"]
        if entry["dtype"] not in _DTYPES:
            raise CheckpointError(f"tensor '{name}': unsupported dtype {entry['dtype']}")
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if entry["offset"] != offset:
            raise CheckpointError(
                f"corrupt checkpoint: tensor '{name}' offset {entry['offset']} != expected {offset}"
            )
        if offset + nbytes > len(blob):
            raise CheckpointError(f"corrupt checkpoint: tensor '{name}' overruns the blob")
        out[name] = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                                  offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: blob holds {len(blob) - offset} unaccounted trailing bytes")
    return out
