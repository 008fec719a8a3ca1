"""Cache shard and manifest serialization.

This is an independent implementation of the on-disk contract the trainer
reads: little-endian shards with a 32-byte header (magic "LFTA", format
version, dtype code, token width d, grid height h, grid width w, record
count) followed by fixed-size `[label u32][cls d][grid h*w*d]` records, one
`manifest.json` per cache directory, shards named `<split>-<nnnn>.lfta`.
Keeping the writer separate from the consumer means the format itself,
not a shared code path, is what the two packages agree on.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import InvalidValue

MAGIC = b"LFTA"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIB3xIIIQ")
DTYPE_CODES = {"f32": 0, "f16": 1}
NP_DTYPES = {"f32": np.float32, "f16": np.float16}


def shard_path(root, split: str, index: int) -> Path:
    return Path(root) / f"{split}-{index:04d}.lfta"


def write_shard(path, records, d: int, h: int, w: int, dtype: str) -> None:
    """Write (label, cls, grid) triples; cls is (d,), grid is (h, w, d)."""
    if dtype not in DTYPE_CODES:
        raise InvalidValue(f"unknown dtype {dtype!r}")
    if not records:
        raise InvalidValue("refusing to write an empty shard")
    np_dtype = NP_DTYPES[dtype]
    path = Path(path)
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_CODES[dtype],
                            d, h, w, len(records)))
        for label, cls, grid in records:
            if cls.shape != (d,) or grid.shape != (h, w, d):
                raise InvalidValue(
                    f"record shape mismatch: cls {cls.shape}, grid "
                    f"{grid.shape}, expected ({d},) and ({h}, {w}, {d})")
            if label < 0:
                raise InvalidValue(f"negative label {label}")
            f.write(struct.pack("<I", label))
            f.write(np.ascontiguousarray(cls, dtype=np_dtype).tobytes())
            f.write(np.ascontiguousarray(grid, dtype=np_dtype).tobytes())


def write_manifest(root, manifest: dict) -> Path:
    """Atomic manifest write: temp file in the same directory, then rename."""
    root = Path(root)
    target = root / "manifest.json"
    fd, tmp = tempfile.mkstemp(dir=root, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(json.dumps(manifest, indent=2))
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return target
