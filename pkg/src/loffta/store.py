"""Binary shard format and cache accessors for cached feature records.

Layout (all little-endian):

    bytes 0..31   header: magic "LFTA" | u32 version=1 | u8 dtype code
                  (0=f32, 1=f16) | 3 reserved bytes | u32 d | u32 h |
                  u32 w | u64 record_count
    then records: [label: u32][cls: d values][grid: h*w*d values, row-major]

Shards are immutable once written. A cache directory holds shards named
``<split>-<nnnn>.lfta`` plus a ``manifest.json`` at its root.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CacheError, CorruptShard, InvalidValue, ShapeMismatch, StorageError
from .records import (DTYPE_CODES, DTYPE_NAMES, DTYPE_NUMPY, CacheManifest,
                      FeatureRecord, record_nbytes)

MAGIC = b"LFTA"
VERSION = 1
_HEADER = struct.Struct("<4sIB3xIIIQ")
HEADER_LEN = _HEADER.size  # 32


@dataclass(frozen=True)
class ShardSummary:
    record_count: int
    byte_length: int


def shard_path(root: str | os.PathLike, split: str, index: int) -> Path:
    return Path(root) / f"{split}-{index:04d}.lfta"


def write_shard(records, dtype: str, path: str | os.PathLike) -> ShardSummary:
    """Serialize records to one shard file. All records must share (d, h, w)."""
    records = list(records)
    if dtype not in DTYPE_CODES:
        raise InvalidValue(f"unknown dtype {dtype!r}")
    if not records:
        raise InvalidValue("cannot write an empty shard")
    h, w, d = records[0].grid.shape
    np_dtype = DTYPE_NUMPY[dtype]
    for i, rec in enumerate(records):
        if rec.grid.shape != (h, w, d) or rec.cls.shape != (d,):
            raise ShapeMismatch(
                f"record {i} has shape {rec.grid.shape}, expected {(h, w, d)}")
        if not np.isfinite(rec.cls).all() or not np.isfinite(rec.grid).all():
            raise InvalidValue(f"record {i} contains non-finite values")

    header = _HEADER.pack(MAGIC, VERSION, DTYPE_CODES[dtype], d, h, w,
                          len(records))
    try:
        with open(path, "wb") as f:
            f.write(header)
            for rec in records:
                f.write(struct.pack("<I", rec.label))
                f.write(np.ascontiguousarray(rec.cls, dtype=np_dtype).tobytes())
                f.write(np.ascontiguousarray(rec.grid, dtype=np_dtype).tobytes())
            f.flush()
            os.fsync(f.fileno())
    except OSError as e:
        raise StorageError(f"failed writing shard {path}: {e}") from e
    size = os.path.getsize(path)
    return ShardSummary(record_count=len(records), byte_length=size)


def _parse_header(buf: bytes, path) -> tuple[str, int, int, int, int]:
    if len(buf) < HEADER_LEN:
        raise CorruptShard(f"{path}: file shorter than header")
    magic, version, dtype_code, d, h, w, count = _HEADER.unpack(buf[:HEADER_LEN])
    if magic != MAGIC:
        raise CorruptShard(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptShard(f"{path}: unsupported version {version}")
    if dtype_code not in DTYPE_NAMES:
        raise CorruptShard(f"{path}: unknown dtype code {dtype_code}")
    if min(d, h, w) < 1:
        raise CorruptShard(f"{path}: non-positive geometry d={d} h={h} w={w}")
    return DTYPE_NAMES[dtype_code], d, h, w, count


class ShardReader:
    """Random access to one shard. Thread-safe: reads use pread on a shared fd.

    Each ``read_record`` pulls exactly one record's bytes and converts them to
    float32 working precision, so transient memory stays within two records.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        try:
            self._fd = os.open(self.path, os.O_RDONLY)
        except OSError as e:
            raise StorageError(f"cannot open shard {path}: {e}") from e
        try:
            head = os.pread(self._fd, HEADER_LEN, 0)
            self.dtype, self.d, self.h, self.w, self.record_count = \
                _parse_header(head, self.path)
            self.record_bytes = record_nbytes(self.d, self.h, self.w, self.dtype)
            expected = HEADER_LEN + self.record_count * self.record_bytes
            actual = os.fstat(self._fd).st_size
            if actual != expected:
                raise CorruptShard(
                    f"{self.path}: size {actual} != expected {expected} "
                    f"for {self.record_count} records")
        except Exception:
            os.close(self._fd)
            self._fd = -1
            raise

    def __len__(self) -> int:
        return self.record_count

    def read_label(self, index: int) -> int:
        if not 0 <= index < self.record_count:
            raise IndexError(f"record {index} out of range [0, {self.record_count})")
        off = HEADER_LEN + index * self.record_bytes
        buf = os.pread(self._fd, 4, off)
        if len(buf) != 4:
            raise CorruptShard(f"{self.path}: truncated at record {index}")
        return struct.unpack("<I", buf)[0]

    def read_record(self, index: int) -> FeatureRecord:
        if not 0 <= index < self.record_count:
            raise IndexError(f"record {index} out of range [0, {self.record_count})")
        off = HEADER_LEN + index * self.record_bytes
        buf = os.pread(self._fd, self.record_bytes, off)
        if len(buf) != self.record_bytes:
            raise CorruptShard(f"{self.path}: truncated at record {index}")
        label = struct.unpack_from("<I", buf, 0)[0]
        vals = np.frombuffer(buf, dtype=DTYPE_NUMPY[self.dtype], offset=4)
        d, h, w = self.d, self.h, self.w
        decoded = vals.astype(np.float32)
        cls = decoded[:d]
        grid = decoded[d:].reshape(h, w, d)
        return FeatureRecord.trusted(label, cls, grid)

    def close(self):
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def split_shard_paths(root: str | os.PathLike, split: str) -> list[Path]:
    return sorted(Path(root).glob(f"{split}-[0-9][0-9][0-9][0-9].lfta"))


class SplitReader:
    """Random access across all shards of one split, by global record index."""

    def __init__(self, root: str | os.PathLike, split: str):
        self.root = Path(root)
        self.split = split
        paths = split_shard_paths(root, split)
        if not paths:
            raise CacheError(f"no shards for split {split!r} under {root}")
        self.shards = [ShardReader(p) for p in paths]
        self._starts = np.cumsum([0] + [len(s) for s in self.shards])

    def __len__(self) -> int:
        return int(self._starts[-1])

    def _locate(self, index: int) -> tuple[ShardReader, int]:
        if not 0 <= index < len(self):
            raise IndexError(f"record {index} out of range [0, {len(self)})")
        si = int(np.searchsorted(self._starts, index, side="right")) - 1
        return self.shards[si], index - int(self._starts[si])

    def read_record(self, index: int) -> FeatureRecord:
        shard, local = self._locate(index)
        return shard.read_record(local)

    def read_label(self, index: int) -> int:
        shard, local = self._locate(index)
        return shard.read_label(local)

    @property
    def shape(self) -> tuple[int, int, int]:
        s = self.shards[0]
        return (s.h, s.w, s.d)

    def close(self):
        for s in self.shards:
            s.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- manifest I/O ---------------------------------------------------------

def manifest_path(root: str | os.PathLike) -> Path:
    return Path(root) / "manifest.json"


def save_manifest(manifest: CacheManifest, root: str | os.PathLike) -> Path:
    """Whole-file atomic write: temp file in the same directory, then rename."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    target = manifest_path(root)
    try:
        fd, tmp = tempfile.mkstemp(dir=root, prefix=".manifest-", suffix=".tmp")
        with os.fdopen(fd, "w") as f:
            f.write(manifest.to_json())
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, target)
    except OSError as e:
        raise StorageError(f"failed writing manifest under {root}: {e}") from e
    return target


def load_manifest(root: str | os.PathLike) -> CacheManifest:
    path = manifest_path(root)
    if not path.exists():
        raise CacheError(f"no manifest.json under {root}")
    try:
        return CacheManifest.from_json(path.read_text())
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise CacheError(f"unreadable manifest {path}: {e}") from e


# -- validation ------------------------------------------------------------

@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_cache(root: str | os.PathLike) -> ValidationReport:
    """Check manifest/shard consistency. Problems are reported, never raised."""
    root = Path(root)
    report = ValidationReport()
    if not root.is_dir():
        report.errors.append(f"CacheMissing: {root} is not a directory")
        return report
    if not manifest_path(root).exists():
        report.errors.append(f"ManifestMissing: no manifest.json under {root}")
        return report
    try:
        manifest = load_manifest(root)
    except CacheError as e:
        report.errors.append(f"ManifestUnreadable: {e}")
        return report

    num_classes = manifest.num_classes
    if not manifest.splits:
        report.errors.append("ManifestInvalid: splits map is empty")
    for split, expected_count in manifest.splits.items():
        paths = split_shard_paths(root, split)
        if not paths:
            report.errors.append(f"MissingShard: split {split!r} has no shard files")
            continue
        total = 0
        unreadable = False
        for path in paths:
            try:
                reader = ShardReader(path)
            except (CorruptShard, StorageError) as e:
                report.errors.append(f"CorruptShard: {e}")
                unreadable = True
                continue
            with reader:
                if (reader.d, reader.h, reader.w) != (manifest.d, manifest.h,
                                                      manifest.w):
                    report.errors.append(
                        f"ShapeMismatch: {path.name} header "
                        f"(d={reader.d}, h={reader.h}, w={reader.w}) != manifest "
                        f"(d={manifest.d}, h={manifest.h}, w={manifest.w})")
                if reader.dtype != manifest.dtype:
                    report.errors.append(
                        f"DtypeMismatch: {path.name} stores {reader.dtype}, "
                        f"manifest says {manifest.dtype}")
                total += reader.record_count
                for i in range(reader.record_count):
                    try:
                        label = reader.read_label(i)
                    except CorruptShard as e:
                        report.errors.append(f"CorruptShard: {e}")
                        break
                    if label >= num_classes:
                        report.errors.append(
                            f"LabelRange: {path.name} record {i} label {label} "
                            f">= class count {num_classes}")
        # an unreadable shard already explains any count gap
        if total != expected_count and not unreadable:
            report.errors.append(
                f"CountMismatch: split {split!r} has {total} records in shards, "
                f"manifest says {expected_count}")
    return report
