"""RGB images and binary PPM (P6, maxval 255) reading/writing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ImageIOError, InputError


@dataclass(frozen=True)
class Image:
    width: int
    height: int
    pixels: np.ndarray  # uint8, shape (height, width, 3)

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.shape != (self.height, self.width, 3):
            raise InputError(f"pixel array {px.shape} does not match {self.width}x{self.height}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_array(cls, arr) -> "Image":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise InputError(f"expected an HxWx3 array, got {arr.shape}")
        if arr.dtype != np.uint8:
            arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        return cls(arr.shape[1], arr.shape[0], arr)

    @classmethod
    def solid(cls, rgb, width: int = 16, height: int = 16) -> "Image":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[...] = np.asarray(rgb, dtype=np.uint8)
        return cls(width, height, px)

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.width == other.width and self.height == other.height and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


def encode_ppm(img: Image) -> bytes:
    return b"P6\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()


def decode_ppm(data: bytes) -> Image:
    fields = []
    pos = 0
    n = len(data)
    # Header: magic, width, height, maxval separated by whitespace; '#' starts a comment.
    while len(fields) < 4:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageIOError("truncated PPM header")
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ImageIOError(f"not a binary PPM (magic {fields[0]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ImageIOError("malformed PPM header") from exc
    if maxval != 255:
        raise ImageIOError(f"only maxval 255 is supported, got {maxval}")
    if width <= 0 or height <= 0:
        raise ImageIOError(f"bad PPM size {width}x{height}")
    if pos >= n or not data[pos : pos + 1].isspace():
        raise ImageIOError("missing whitespace after PPM header")
    pos += 1
    size = width * height * 3
    body = data[pos : pos + size]
    if len(body) != size:
        raise ImageIOError(f"PPM body has {len(body)} bytes, expected {size}")
    px = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return Image(width, height, px)


def read_ppm(path) -> Image:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    return decode_ppm(data)


def write_ppm(path, img: Image) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(encode_ppm(img))
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc

