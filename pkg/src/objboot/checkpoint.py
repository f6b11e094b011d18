"""Versioned binary container for training state.

Layout (all integers little-endian)::

    8 bytes   magic b"OBJBOOT\\0"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON header (sorted keys): metadata + array table
    ...       array payloads, little-endian, in table order

Saving is deterministic, so save -> load -> save reproduces the same bytes.
Writes go to a temporary file that is renamed into place.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"OBJBOOT\0"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


def _le_dtype(arr: np.ndarray) -> np.dtype:
    return arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype


def save_container(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    table, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dt = _le_dtype(arr)
        data = arr.astype(dt, copy=False).tobytes(order="C")
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"endianness": "little", "format_version": FORMAT_VERSION, "meta": meta,
                         "arrays": table}, sort_keys=True, separators=(",", ":")).encode()
    payload = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[20:20 + hlen].decode())
    base = 20 + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        buf = raw[start:start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header["meta"], arrays
