"""Shared fixtures: synthetic image corpora and a struct-level shard reader."""

import struct
from pathlib import Path

import numpy as np
from PIL import Image


def make_corpus(root, class_names=("aster", "birch", "cedar"), per_class=5,
                size=48, seed=0):
    """Write small PNGs in class subfolders; per-class color plus noise."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for c, name in enumerate(class_names):
        cdir = root / name
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            base = np.zeros((size, size, 3), np.uint8)
            base[..., c % 3] = 110 + 25 * (i % 4)
            img = base + rng.integers(0, 70, (size, size, 3), dtype=np.uint8)
            Image.fromarray(img).save(cdir / f"img_{i:03d}.png")
    return len(class_names) * per_class


def make_half_image(path, size=224):
    """Left half black, right half white."""
    arr = np.zeros((size, size, 3), np.uint8)
    arr[:, size // 2:] = 255
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def read_shard(path):
    """Parse a shard straight from its bytes.

    Returns ((magic, version, dtype_code, d, h, w, count), records) with
    records as (label, cls float32, grid float32) triples.
    """
    buf = Path(path).read_bytes()
    header = struct.unpack_from("<4sIB3xIIIQ", buf, 0)
    magic, version, dcode, d, h, w, count = header
    np_dtype = np.float32 if dcode == 0 else np.float16
    per = d + h * w * d
    rb = 4 + per * np.dtype(np_dtype).itemsize
    records = []
    off = 32
    for _ in range(count):
        label = struct.unpack_from("<I", buf, off)[0]
        vals = np.frombuffer(buf, dtype=np_dtype, count=per,
                             offset=off + 4).astype(np.float32)
        records.append((label, vals[:d], vals[d:].reshape(h, w, d)))
        off += rb
    assert off <= len(buf)
    return header, records
