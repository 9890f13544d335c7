"""Checkpoint files: 8-byte little-endian header length, a UTF-8 JSON header,
then the raw little-endian float64 payload of every tensor in header order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from derotnet.errors import DataError

SCHEMA_VERSION = 1
_MAGIC = b"DRNCKPT1"


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    entries = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {"schema_version": SCHEMA_VERSION, "tensors": entries, "metadata": metadata or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema version {header.get('schema_version')}")
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]], dtype="<f8").reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float64)
    return tensors, header.get("metadata", {})
