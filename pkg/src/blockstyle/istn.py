"""The "ISTN" binary container: 4 magic bytes, a little-endian u32 version,
then a little-endian float64 stream. Readers know the layout of the stream."""

from __future__ import annotations

import struct

import numpy as np

from .errors import ImageIOError

MAGIC = b"ISTN"
VERSION = 1
_HEADER = struct.Struct("<4sI")


def pack(values) -> bytes:
    flat = np.ascontiguousarray(values, dtype="<f8").ravel()
    return _HEADER.pack(MAGIC, VERSION) + flat.tobytes()


def unpack(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise ImageIOError("ISTN data shorter than its header")
    magic, version = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ImageIOError(f"bad ISTN magic {magic!r}")
    if version != VERSION:
        raise ImageIOError(f"unsupported ISTN version {version}")
    body = data[_HEADER.size :]
    if len(body) % 8:
        raise ImageIOError("ISTN body is not a whole number of float64 values")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)


def write(path, values) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(pack(values))
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def read(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            return unpack(fh.read())
    except OSError as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
