"""Versioned binary checkpoints.

Layout (little endian)::

    b"JUSTCKPT"  u32 version
    u32 n  then n bytes of UTF-8 JSON (config, step, mode, seed, vocabulary, ...)
    u32 record count, then per record:
        u32 name length, name, u8 dtype tag, u32 rank, u32 dims[rank], payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"JUSTCKPT"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray]

    @property
    def step(self) -> int:
        return int(self.meta["step"])


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob,
              struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<BI", _DTYPE_TAGS[dtype], arr.ndim),
                   struct.pack(f"<{arr.ndim}I", *arr.shape), np.ascontiguousarray(arr, dtype=dtype).tobytes()]
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", raw, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += 4
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    meta = json.loads(raw[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + ln].decode("utf-8")
        pos += ln
        tag, rank = struct.unpack_from("<BI", raw, pos)
        pos += 5
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        dtype = _TAG_DTYPES[tag]
        size = int(np.prod(dims)) * dtype.itemsize
        arrays[name] = np.frombuffer(raw[pos:pos + size], dtype=dtype).reshape(dims).copy()
        pos += size
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return Checkpoint(meta, arrays)
