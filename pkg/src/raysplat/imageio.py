"""Image containers: planar float ``LPI1`` and 8-bit binary PPM (P6)."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

IMAGE_MAGIC = b"LPI1"


def write_lpi(path, image: np.ndarray) -> None:
    """Write an H x W x C float image as C planes of H x W little-endian FP32."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    planes = np.ascontiguousarray(img.transpose(2, 0, 1)).astype("<f4")
    Path(path).write_bytes(IMAGE_MAGIC + struct.pack("<3I", w, h, c) + planes.tobytes())


def read_lpi(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != IMAGE_MAGIC or len(raw) < 16:
        raise FormatError(f"{path}: not an LPI1 image")
    w, h, c = struct.unpack("<3I", raw[4:16])
    body = np.frombuffer(raw, "<f4", offset=16)
    if body.size != w * h * c:
        raise FormatError(f"{path}: payload has {body.size} floats, expected {w * h * c}")
    return body.reshape(c, h, w).transpose(1, 2, 0).astype(np.float32)


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM output needs H x W x 3, got {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + to_bytes(img).tobytes())


def read_ppm(path) -> np.ndarray:
    """Returns an H x W x 3 uint8 array."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported")
    data = np.frombuffer(raw, np.uint8, w * h * 3, pos + 1)
    return data.reshape(h, w, 3)
