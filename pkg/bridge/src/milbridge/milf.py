"""MILF feature-file writer.

Implements the published interchange format so emitted files are directly
consumable by the survival engine: magic ``MILF`` | version u16=1 |
extractor_id (u8 length + UTF-8) | m u32 | d u32 | coords flag u8 |
m pairs of i32 | m*d float32 row-major | trailing CRC-32 of all preceding
bytes. Little-endian throughout. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"MILF"
VERSION = 1


def encode(extractor_id: str, values: np.ndarray, coords: np.ndarray) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f4")
    coords = np.ascontiguousarray(coords, dtype="<i4")
    m, d = values.shape
    if coords.shape != (m, 2):
        raise ValueError(f"coords shape {coords.shape} does not match {m} patches")
    ident = extractor_id.encode("utf-8")
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<H", VERSION)
    buf += struct.pack("<B", len(ident)) + ident
    buf += struct.pack("<II", m, d)
    buf += struct.pack("<B", 1)
    buf += coords.tobytes()
    buf += values.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


def write(path, extractor_id: str, values: np.ndarray, coords: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(extractor_id, values, coords))
    os.replace(tmp, path)
