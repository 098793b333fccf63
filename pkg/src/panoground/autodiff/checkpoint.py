"""Checkpoint container: length-prefixed JSON manifest, then raw payloads.

Layout::

    b"PGCK" | uint64 LE manifest length | manifest JSON (UTF-8) | payloads

The manifest maps tensor name to shape, dtype and byte offset (relative to
the start of the payload region) and carries ``format: "pg-ckpt-1"`` plus
free-form metadata. Payloads are little-endian, C-ordered.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT = "pg-ckpt-1"
MAGIC = b"PGCK"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    entries = {}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.name
        if dt not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dt} for {name}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": dt, "offset": offset, "nbytes": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    manifest = {"format": FORMAT, "tensors": entries, "meta": dict(meta or {})}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[4:12])
    manifest = json.loads(raw[12:12 + n].decode("utf-8"))
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {manifest.get('format')!r}")
    base = 12 + n
    tensors = {}
    for name, e in manifest["tensors"].items():
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arr = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).astype(e["dtype"]).reshape(e["shape"])
        tensors[name] = arr
    return tensors, manifest["meta"]
