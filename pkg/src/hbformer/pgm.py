"""Binary netpbm I/O: P5 grayscale for masks, P6 for RGB images.

Headers are ``magic``, width, height and maxval separated by single spaces or
newlines (``#`` comments allowed when reading); maxval must be 255. RGB
payloads are written as three whole planes (R, then G, then B) rather than
interleaved triples, matching the ``[3, H, W]`` image layout.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PnmError(ValueError):
    pass


def _header(magic: bytes, h: int, w: int) -> bytes:
    return magic + f"\n{w} {h}\n255\n".encode("ascii")


def encode_pgm(mask: np.ndarray) -> bytes:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"PGM holds a 2-D array, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("PGM values must lie in [0, 255]")
    return _header(b"P5", *arr.shape) + arr.astype(np.uint8).tobytes()


def encode_ppm(image: np.ndarray) -> bytes:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"PPM holds a [3, H, W] array, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("PPM values must lie in [0, 255]")
    return _header(b"P6", *arr.shape[1:]) + arr.astype(np.uint8).tobytes()


def _parse(blob: bytes, magic: bytes):
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            break
        fields.append(blob[start:pos])
    echo = blob[:16]
    if len(fields) < 4 or fields[0] != magic or pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise PnmError(f"malformed {magic.decode()} header: {echo!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise PnmError(f"malformed {magic.decode()} header: {echo!r}") from None
    if maxval != 255:
        raise PnmError(f"maxval must be 255, got {maxval}")
    if w < 1 or h < 1:
        raise PnmError(f"bad dimensions {w}x{h}")
    return h, w, pos + 1


def decode_pgm(blob: bytes) -> np.ndarray:
    h, w, start = _parse(blob, b"P5")
    payload = blob[start:]
    if len(payload) != h * w:
        raise PnmError(f"expected {h * w} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, np.uint8).reshape(h, w).copy()


def decode_ppm(blob: bytes) -> np.ndarray:
    h, w, start = _parse(blob, b"P6")
    payload = blob[start:]
    if len(payload) != 3 * h * w:
        raise PnmError(f"expected {3 * h * w} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, np.uint8).reshape(3, h, w).copy()


def pgm_write(path, mask: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(mask))


def pgm_read(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def ppm_write(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def ppm_read(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def to_bytes_image(image: np.ndarray) -> np.ndarray:
    """Float ``[0, 1]`` image -> uint8 by rounding ``x * 255``."""
    return np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)
