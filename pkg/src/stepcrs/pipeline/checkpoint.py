"""Checkpoints: ``<name>.manifest.json`` plus ``<name>.params.bin``.

The blob is the concatenation of little-endian float32 arrays in manifest
order; the manifest records name, shape, dtype, byte offset and length of
each array together with the config snapshot, seed and training progress.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "stepcrs-checkpoint/1"
BLOB_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def checkpoint_paths(prefix) -> tuple[Path, Path]:
    prefix = str(prefix)
    return Path(prefix + ".manifest.json"), Path(prefix + ".params.bin")


def save_arrays(prefix, arrays: dict[str, np.ndarray], meta: dict) -> tuple[Path, Path]:
    manifest_path, blob_path = checkpoint_paths(prefix)
    entries, offset = [], 0
    with blob_path.open("wb") as fh:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype=BLOB_DTYPE).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                            "offset": offset, "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    manifest = dict(meta, format=FORMAT, byte_order="little", arrays=entries, blob=blob_path.name)
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return manifest_path, blob_path


def load_arrays(prefix) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path, blob_path = checkpoint_paths(prefix)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        blob = blob_path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {prefix}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    arrays = {}
    for e in manifest["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"blob too short for array {e['name']}")
        arr = np.frombuffer(blob[e["offset"]:end], dtype=BLOB_DTYPE)
        if arr.size != int(np.prod(e["shape"])):
            raise CheckpointError(f"array {e['name']}: byte length does not match shape {e['shape']}")
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    meta = {k: v for k, v in manifest.items() if k not in ("arrays", "format", "byte_order", "blob")}
    return arrays, meta


def assign_parameters(params: dict, arrays: dict[str, np.ndarray]) -> None:
    """Copy arrays into live parameters, validating names and shapes."""
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    for name, p in params.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {arr.shape}, model {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
