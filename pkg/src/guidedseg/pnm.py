"""Binary PPM (P6) and PGM (P5) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import MalformedHeaderError

_CHANNELS = {b"P5": 1, b"P6": 3}


def _header_tokens(data: bytes, path, count: int):
    """Return the first ``count`` whitespace-separated header tokens and the payload offset."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MalformedHeaderError(path, "truncated header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not data[pos:pos + 1].isspace():
        raise MalformedHeaderError(path, "missing whitespace after maxval")
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM or PPM file.

    Returns uint8 (maxval < 256) or uint16 pixels shaped H x W (P5) or H x W x 3 (P6),
    rescaled to 0..255 when maxval is not 255.
    """
    path = Path(path)
    data = path.read_bytes()
    magic = data[:2]
    if magic not in _CHANNELS:
        raise MalformedHeaderError(path, f"unsupported magic {magic!r}")
    tokens, offset = _header_tokens(data[2:], path, 3)
    offset += 2
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise MalformedHeaderError(path, f"non-integer header fields {tokens!r}") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise MalformedHeaderError(path, f"bad dimensions/maxval {width}x{height}/{maxval}")
    channels = _CHANNELS[magic]
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    expected = width * height * channels * dtype.itemsize
    payload = data[offset:offset + expected]
    if len(payload) != expected:
        raise MalformedHeaderError(path, f"raster has {len(payload)} bytes, expected {expected}")
    pixels = np.frombuffer(payload, dtype=dtype).reshape(
        (height, width, channels) if channels == 3 else (height, width))
    if maxval != 255:
        pixels = np.round(pixels.astype(np.float64) * (255.0 / maxval))
    return pixels.astype(np.uint8)


def write_pnm(path, pixels: np.ndarray) -> None:
    """Write uint8 pixels as P5 (2-D input) or P6 (H x W x 3 input) with maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {pixels.shape} as PNM")
    height, width = pixels.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (width, height)
    Path(path).write_bytes(header + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Quantise [0, 1] reals to 0..255."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
