"""Versioned binary tensor container.

Layout (all integers little-endian)::

    b"TRKC" | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    u32 n_entries, then per entry:
    u16 name_len | name | u8 dtype (0 = f32, 1 = i32) | u8 ndim | u32 dims... | data

Entries are written in sorted name order so identical content gives
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TRKC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}


class CheckpointError(ValueError):
    pass


def _code(arr: np.ndarray) -> int:
    return 1 if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else 0


def dumps(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, object] | None = None) -> bytes:
    meta = json.dumps(dict(metadata or {}), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _code(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a TRKC checkpoint")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(blob[off:off + meta_len].decode())
    off += meta_len
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n):
        (klen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + klen].decode()
        off += klen
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(shape).copy()
        off += count * dt.itemsize
        tensors[name] = arr
    if off != len(blob):
        raise CheckpointError("trailing bytes in checkpoint")
    return tensors, meta


def save(path: str | Path, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, object] | None = None) -> str:
    """Write a checkpoint and return the SHA-256 of its bytes."""
    blob = dumps(tensors, metadata)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def to_float(tensors: Mapping[str, np.ndarray], dtype="float64") -> dict[str, np.ndarray]:
    return {k: v.astype(dtype) for k, v in tensors.items()}
