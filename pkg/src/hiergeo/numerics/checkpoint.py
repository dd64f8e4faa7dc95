"""Checkpoint container.

A checkpoint is an uncompressed ``.npz`` archive (a zip of ``.npy`` members)
holding:

* ``param/<name>``  - one little-endian float array per model parameter
* ``optim/<name>``  - optional momentum buffers, same layout
* ``__meta__``      - UTF-8 JSON as a uint8 array with keys
  ``format_version``, ``model_config`` and anything the caller adds
  (partition hash, epoch, RNG state, ...)

No pickled objects are stored; ``np.load(..., allow_pickle=False)`` reads it.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(
    path,
    params: dict[str, np.ndarray],
    model_config: dict,
    meta: dict | None = None,
    buffers: dict[str, np.ndarray] | None = None,
) -> Path:
    path = Path(path)
    header = {"format_version": FORMAT_VERSION, "model_config": model_config, **(meta or {})}
    arrays = {f"param/{k}": _le(v) for k, v in params.items()}
    for k, v in (buffers or {}).items():
        arrays[f"optim/{k}"] = _le(v)
    arrays["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict[str, np.ndarray]]:
    """Return ``(params, meta, buffers)``."""
    with np.load(Path(path), allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise CheckpointError(f"{path}: missing __meta__ entry")
        meta = json.loads(bytes(z["__meta__"]).decode())
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint format_version {version}")
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        buffers = {k[len("optim/"):]: z[k] for k in z.files if k.startswith("optim/")}
    return params, meta, buffers
