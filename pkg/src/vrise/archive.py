"""Binary archive for stacks of maps or masks.

Layout, all integers little-endian:

    bytes 0..3   magic "VRSE"
    byte  4      format version (currently 1)
    byte  5      dtype code: 0 = float32, 1 = float16
    bytes 6..7   reserved, written as zero
    bytes 8..11  u32 count
    bytes 12..15 u32 height
    bytes 16..19 u32 width
    payload      count*height*width values, row-major, little-endian
    trailer      u32 metadata length, then UTF-8 JSON metadata

float16 storage costs at most 2**-11 absolute error per value on [0, 1]
(round to nearest, ties to even), which downstream metrics tolerate; loads
always widen back to float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ArchiveError",
    "ArchiveMagicError",
    "ArchiveVersionError",
    "ArchiveTruncatedError",
    "save_archive",
    "load_archive",
    "LoadedArchive",
]

MAGIC = b"VRSE"
VERSION = 1
_DTYPES = {"f32": 0, "f16": 1}
_CODES = {0: "<f4", 1: "<f2"}
_HEADER = struct.Struct("<4sBBHIII")


class ArchiveError(Exception):
    """Base class for unreadable archives."""


class ArchiveMagicError(ArchiveError):
    """The file does not start with the expected magic bytes."""


class ArchiveVersionError(ArchiveError):
    """The file announces a format version this reader does not speak."""


class ArchiveTruncatedError(ArchiveError):
    """The file ends before the announced payload or trailer is complete."""


@dataclass(frozen=True)
class LoadedArchive:
    values: np.ndarray  # (count, H, W) float32
    metadata: dict
    stored_dtype: str  # "f32" or "f16"

    @property
    def count(self) -> int:
        return int(self.values.shape[0])


def save_archive(
    path: str | Path,
    values: np.ndarray,
    metadata: dict | None = None,
    dtype: str = "f32",
) -> None:
    """Write a (count, H, W) stack; a single (H, W) array is auto-promoted."""
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be 'f32' or 'f16', got {dtype!r}")
    arr = np.asarray(values)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3 or arr.size == 0:
        raise ValueError(f"expected a non-empty (count, H, W) stack, got shape {arr.shape}")
    count, h, w = arr.shape
    code = _DTYPES[dtype]
    payload = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
    meta = json.dumps(metadata or {}, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, code, 0, count, h, w))
        f.write(payload)
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)


def load_archive(path: str | Path) -> LoadedArchive:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ArchiveTruncatedError(f"{path}: only {len(blob)} bytes, header needs {_HEADER.size}")
    magic, version, code, _reserved, count, h, w = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ArchiveMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ArchiveVersionError(f"{path}: version {version}, reader speaks {VERSION}")
    if code not in _CODES:
        raise ArchiveError(f"{path}: unknown dtype code {code}")
    itemsize = 4 if code == 0 else 2
    need = count * h * w * itemsize
    off = _HEADER.size
    if len(blob) < off + need + 4:
        raise ArchiveTruncatedError(
            f"{path}: payload of {need} bytes plus trailer does not fit in {len(blob)} bytes"
        )
    values = (
        np.frombuffer(blob, dtype=_CODES[code], count=count * h * w, offset=off)
        .reshape(count, h, w)
        .astype(np.float32)
    )
    off += need
    (mlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + mlen:
        raise ArchiveTruncatedError(f"{path}: metadata trailer truncated")
    try:
        metadata = json.loads(blob[off : off + mlen].decode("utf-8")) if mlen else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: metadata is not valid JSON: {exc}") from exc
    stored = "f32" if code == 0 else "f16"
    return LoadedArchive(values=values, metadata=metadata, stored_dtype=stored)
