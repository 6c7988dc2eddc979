"""Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError

__all__ = ["read_netpbm", "write_netpbm", "read_image", "write_image", "encode_netpbm", "decode_netpbm"]

_WHITESPACE = b" \t\r\n\x0b\x0c"


def _tokens(buf: bytes, count: int, pos: int, source: str) -> tuple[list[int], int]:
    """Read ``count`` integer header fields starting at ``pos``, skipping comments."""
    values = []
    n = len(buf)
    while len(values) < count:
        while pos < n and buf[pos] in _WHITESPACE:
            pos += 1
        if pos < n and buf[pos] == ord("#"):
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos] not in _WHITESPACE and buf[pos] != ord("#"):
            pos += 1
        token = buf[start:pos]
        if not token.isdigit():
            raise DataError(f"{source}: malformed header field {token!r}")
        values.append(int(token))
    return values, pos


def decode_netpbm(buf: bytes, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Decode to a uint8 array ``[H, W]`` (P5) or ``[H, W, 3]`` (P6) and its maxval."""
    magic = buf[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise DataError(f"{source}: unsupported image magic {magic!r} (expected P5 or P6)")
    (width, height, maxval), pos = _tokens(buf, 3, 2, source)
    if width <= 0 or height <= 0:
        raise DataError(f"{source}: bad dimensions {width}x{height}")
    if not 0 < maxval < 256:
        raise DataError(f"{source}: only 8-bit images are supported (maxval={maxval})")
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise DataError(f"{source}: missing whitespace before raster")
    pos += 1
    expected = width * height * channels
    raster = buf[pos : pos + expected]
    if len(raster) != expected:
        raise DataError(f"{source}: truncated raster ({len(raster)} of {expected} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return arr.reshape(shape).copy(), maxval


def encode_netpbm(pixels: np.ndarray, maxval: int = 255) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise DataError(f"pixels must be uint8, got {pixels.dtype}")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"pixels must be [H, W] or [H, W, 3], got {pixels.shape}")
    h, w = pixels.shape[:2]
    return magic + f"\n{w} {h}\n{maxval}\n".encode("ascii") + pixels.tobytes()


def read_netpbm(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc.strerror}") from None
    return decode_netpbm(buf, str(path))


def write_netpbm(path, pixels: np.ndarray, maxval: int = 255) -> None:
    Path(path).write_bytes(encode_netpbm(pixels, maxval))


def read_image(path) -> np.ndarray:
    """Load a P5/P6 file as float64 ``[C, H, W]`` scaled to [0, 1]."""
    pixels, maxval = read_netpbm(path)
    img = pixels.astype(np.float64) / maxval
    return img[None] if img.ndim == 2 else np.ascontiguousarray(img.transpose(2, 0, 1))


def write_image(path, image: np.ndarray) -> None:
    """Write ``[C, H, W]`` (C = 1 or 3) values in [0, 1] as an 8-bit P5/P6 file."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise DataError(f"image must be [1|3, H, W], got {image.shape}")
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    write_netpbm(path, pixels[0] if pixels.shape[0] == 1 else pixels.transpose(1, 2, 0))
