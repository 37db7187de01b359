"""Checkpoint serialization: JSON manifest + one little-endian raw float file.

A checkpoint directory holds ``manifest.json`` and ``params.bin``. The
manifest lists every tensor's name, shape, dtype, byte offset, and frozen
flag, plus free-form ``meta`` (config snapshot, training-step counter).
Round-trips are bit-exact. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .tensorgrad import Tensor

MANIFEST_NAME = "manifest.json"
PARAMS_NAME = "params.bin"

_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint on disk."""


def _atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt_dir, params: dict, frozen: set | None = None,
                    meta: dict | None = None) -> None:
    """Write ``params`` (name -> Tensor) under ``ckpt_dir``.

    ``frozen`` names tensors that step-2 training must never touch.
    """
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    frozen = frozen or set()
    unknown = frozen - set(params)
    if unknown:
        raise CheckpointError(f"frozen flags for unknown tensors: {sorted(unknown)}")

    entries = []
    blob = bytearray()
    for name in sorted(params):
        arr = params[name].data
        dtype = "float64" if arr.dtype == np.float64 else "float32"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dtype,
            "offset": len(blob),
            "frozen": name in frozen,
        })
        blob.extend(raw)

    manifest = {"tensors": entries, "meta": meta or {}}
    _atomic_write(ckpt_dir / PARAMS_NAME, bytes(blob))
    _atomic_write(ckpt_dir / MANIFEST_NAME,
                  json.dumps(manifest, indent=1, sort_keys=True).encode())


def load_checkpoint(ckpt_dir, requires_grad: bool = False):
    """Read a checkpoint; returns (params dict, frozen name set, meta dict).

    Frozen tensors are always loaded with requires_grad=False.
    """
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"no {MANIFEST_NAME} in {ckpt_dir}")
    manifest = json.loads(manifest_path.read_text())
    blob = (ckpt_dir / PARAMS_NAME).read_bytes()

    params: dict[str, Tensor] = {}
    frozen: set[str] = set()
    for entry in manifest["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise CheckpointError(f"tensor {entry['name']!r} overruns {PARAMS_NAME}")
        arr = np.frombuffer(blob[start:end], dtype=dtype).reshape(shape).copy()
        is_frozen = bool(entry.get("frozen"))
        params[entry["name"]] = Tensor(arr, requires_grad=requires_grad and not is_frozen)
        if is_frozen:
            frozen.add(entry["name"])
    return params, frozen, manifest.get("meta", {})


def checkpoint_bytes(ckpt_dir) -> bytes:
    """Raw parameter bytes, for byte-identity assertions."""
    return (Path(ckpt_dir) / PARAMS_NAME).read_bytes()
