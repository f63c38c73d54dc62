"""The ``MILB`` tensor file: magic, u32 rows, u32 cols, float32 payload (all little-endian)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MILB"
HEADER = struct.Struct("<4sII")


class MILBFormatError(ValueError):
    """A tensor file is malformed (bad magic, truncated, or wrong size)."""


def encode(matrix: np.ndarray) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"MILB stores 2-D matrices only, got shape {m.shape}")
    rows, cols = m.shape
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    return HEADER.pack(MAGIC, rows, cols) + payload


def decode(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(blob) < HEADER.size:
        raise MILBFormatError(f"{name}: truncated header ({len(blob)} bytes)")
    magic, rows, cols = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise MILBFormatError(f"{name}: bad magic bytes {magic!r}")
    expected = HEADER.size + 4 * rows * cols
    if len(blob) != expected:
        raise MILBFormatError(f"{name}: expected {expected} bytes for {rows}x{cols}, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=HEADER.size)
    return data.astype(np.float64).reshape(rows, cols)


def write(path: str | Path, matrix: np.ndarray) -> None:
    Path(path).write_bytes(encode(matrix))


def read(path: str | Path, name: str | None = None) -> np.ndarray:
    path = Path(path)
    return decode(path.read_bytes(), name or path.name)


def f32_roundtrip(matrix: np.ndarray) -> np.ndarray:
    """The value a matrix takes after one write/read cycle."""
    return np.asarray(matrix, dtype=np.float32).astype(np.float64)
