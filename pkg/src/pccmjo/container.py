"""Tagged little-endian binary container shared by all non-field artifacts.

Layout::

    magic      4 bytes   (e.g. b"MJOC", b"MJOZ", b"MJOE", b"MJOW", b"MJOA")
    version    u32
    n_entries  u32
    entries    repeated:
        name_len u16, name utf-8,
        kind     u8   (0 = f64 array, 1 = i64 array, 2 = utf-8 text, 3 = f32 array)
        ndim     u8,  shape u64 * ndim   (text: ndim = 1, shape = byte length)
        payload

Writes go through a temporary file and an atomic rename.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

CONTAINER_VERSION = 1

_KIND_F64, _KIND_I64, _KIND_TEXT, _KIND_F32 = 0, 1, 2, 3
_DTYPES = {_KIND_F64: "<f8", _KIND_I64: "<i8", _KIND_F32: "<f4"}


class FormatError(ValueError):
    """Base class for malformed artifact files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class SizeMismatchError(FormatError):
    pass


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(magic: bytes, entries: dict) -> bytes:
    """Serialize ``entries`` (name -> ndarray | int | float | str) under ``magic``."""
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    parts = [magic, struct.pack("<II", CONTAINER_VERSION, len(entries))]
    for name, value in entries.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        if isinstance(value, str):
            raw = value.encode("utf-8")
            parts.append(struct.pack("<BBQ", _KIND_TEXT, 1, len(raw)) + raw)
            continue
        arr = np.asarray(value)
        if arr.dtype == np.float32:
            kind = _KIND_F32
        elif np.issubdtype(arr.dtype, np.floating):
            kind = _KIND_F64
        elif np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
            kind = _KIND_I64
        else:
            raise TypeError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        arr = arr.astype(_DTYPES[kind], order="C")  # keeps 0-d shapes
        parts.append(struct.pack("<BB", kind, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(payload: bytes, magic: bytes) -> dict:
    if len(payload) < 12:
        raise SizeMismatchError("file shorter than container header")
    if payload[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {payload[:4]!r}")
    version, n_entries = struct.unpack_from("<II", payload, 4)
    if version != CONTAINER_VERSION:
        raise VersionMismatchError(f"container version {version}, expected {CONTAINER_VERSION}")
    pos = 12
    out = {}

    def take(n):
        nonlocal pos
        if pos + n > len(payload):
            raise SizeMismatchError("truncated container payload")
        chunk = payload[pos:pos + n]
        pos += n
        return chunk

    for _ in range(n_entries):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        kind, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        if kind == _KIND_TEXT:
            out[name] = take(shape[0]).decode("utf-8")
            continue
        if kind not in _DTYPES:
            raise FormatError(f"entry {name!r}: unknown kind {kind}")
        dtype = np.dtype(_DTYPES[kind])
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(take(count * dtype.itemsize), dtype=dtype).reshape(shape)
        native = {_KIND_F64: np.float64, _KIND_I64: np.int64, _KIND_F32: np.float32}[kind]
        out[name] = arr.astype(native)
    if pos != len(payload):
        raise SizeMismatchError(f"{len(payload) - pos} trailing bytes after last entry")
    return out


def save(path, magic: bytes, entries: dict) -> None:
    atomic_write_bytes(path, encode(magic, entries))


def load(path, magic: bytes) -> dict:
    return decode(Path(path).read_bytes(), magic)
