"""Artifact persistence: flat binary tensors, CSV tables, PGM previews.

The tensor format is deliberately primitive so any language can read it:
magic bytes, rank and extents as little-endian u64, then the f64 payload
in row-major order.
"""

from __future__ import annotations

import csv
import struct

import numpy as np

from .autodiff import Tensor
from .errors import ConfigurationError

__all__ = ["save_tensor", "load_tensor", "write_csv", "write_pgm", "MAGIC"]

MAGIC = b"PGT1"


def save_tensor(path, t: Tensor) -> None:
    # asarray keeps rank-0 tensors rank-0 (ascontiguousarray would not)
    a = np.asarray(t.array, dtype="<f8", order="C")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", a.ndim))
        for extent in a.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(a.tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ConfigurationError(f"{path}: not a tensor file")
    (rank,) = struct.unpack_from("<Q", raw, 4)
    off = 12
    shape = []
    for _ in range(rank):
        (extent,) = struct.unpack_from("<Q", raw, off)
        shape.append(extent)
        off += 8
    count = int(np.prod(shape)) if shape else 1
    if len(raw) != off + 8 * count:
        raise ConfigurationError(f"{path}: truncated tensor payload")
    a = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
    return Tensor(a.reshape(shape).astype(np.float64))


def write_csv(path, header, rows) -> None:
    """CSV with a fixed header; floats go through repr for full precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return int(v)
    return v


def write_pgm(path, t: Tensor, lo: float = 0.0, hi: float = 1.0) -> None:
    """Binary 8-bit PGM of a 2-d tensor, values clipped into [lo, hi]."""
    a = t.array
    if a.ndim != 2:
        raise ConfigurationError("pgm wants a 2-d tensor")
    if not hi > lo:
        raise ConfigurationError("hi must exceed lo")
    q = np.clip((a - lo) / (hi - lo), 0.0, 1.0)
    pix = np.round(q * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
