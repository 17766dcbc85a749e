"""On-disk formats: complex grids, schedules, line masks and parameter checkpoints.

Complex grid file (``.immc``)::

    offset  size  field
    0       4     magic b"IMMC"
    4       2     version (u16, currently 1)
    6       2     dtype code (u16, 1 = interleaved complex float32)
    8       4     height (u32)
    12      4     width (u32)
    16      ...   row-major (real, imag) pairs, little-endian float32

Checkpoint file (``.ckpt``)::

    magic b"IMCK", version u16, reserved u16, metadata length u32,
    parameter count u32, metadata (UTF-8 JSON), then per parameter:
    name length u16, name (UTF-8), ndim u16, ndim x u32 extents,
    little-endian float32 data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

IMMC_MAGIC = b"IMMC"
IMMC_VERSION = 1
DTYPE_COMPLEX64 = 1
CKPT_MAGIC = b"IMCK"
CKPT_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


def write_complex(path, data: np.ndarray) -> None:
    """Write a [2, h, w] real/imaginary array."""
    data = np.asarray(data)
    if data.ndim != 3 or data.shape[0] != 2:
        raise ValueError(f"expected [2, h, w], got {data.shape}")
    _, h, w = data.shape
    header = IMMC_MAGIC + struct.pack("<HHII", IMMC_VERSION, DTYPE_COMPLEX64, h, w)
    body = np.ascontiguousarray(np.moveaxis(data, 0, -1), dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_complex(path) -> np.ndarray:
    """Read a grid written by :func:`write_complex` as float64 [2, h, w]."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != IMMC_MAGIC:
        raise FormatError(f"{path}: not an IMMC file")
    version, dtype, h, w = struct.unpack("<HHII", raw[4:16])
    if version != IMMC_VERSION or dtype != DTYPE_COMPLEX64:
        raise FormatError(f"{path}: unsupported version {version} / dtype {dtype}")
    expected = 16 + h * w * 2 * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w, 2)
    return np.moveaxis(arr, -1, 0).astype(np.float64)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def save_checkpoint(path, params: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<HHII", CKPT_VERSION, 0, len(meta), len(params))
    out += meta
    for name, value in params.items():
        arr = np.asarray(value)
        enc = name.encode()
        out += struct.pack("<H", len(enc)) + enc
        out += struct.pack("<H", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    try:
        version, _, meta_len, count = struct.unpack_from("<HHII", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        metadata = json.loads(raw[pos:pos + meta_len].decode())
        pos += meta_len
        params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint") from exc
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return params, metadata


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit grayscale PGM; values are scaled so the maximum maps to 255."""
    img = np.asarray(image, dtype=np.float64)
    peak = img.max()
    scaled = np.zeros_like(img) if peak <= 0 else img / peak
    pixels = np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())
