"""Versioned binary checkpoints for MIL heads.

Layout (little-endian): magic ``MILC`` | version u16=1 | u32 JSON header
length | JSON header (head kind, config, seed, epoch, parameter manifest)
| raw float32 parameter blobs in manifest order | trailing CRC-32 over all
preceding bytes.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptFileError
from .heads import HeadConfig, MilHead, TransmilConfig, build_head
from .rng import Rng

CKPT_MAGIC = b"MILC"
CKPT_VERSION = 1


def save_checkpoint(path, head: MilHead, seed: int, epoch: int) -> None:
    header = {
        "kind": head.config.kind,
        "config": dataclasses.asdict(head.config),
        "seed": int(seed),
        "epoch": int(epoch),
        "params": [{"name": n, "shape": list(t.shape)} for n, t in head.named_parameters()],
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = bytearray()
    buf += CKPT_MAGIC
    buf += struct.pack("<H", CKPT_VERSION)
    buf += struct.pack("<I", len(hdr)) + hdr
    for _, t in head.named_parameters():
        buf += t.data.astype("<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path, dtype=np.float32) -> tuple[MilHead, dict]:
    """Rebuild the head and return (head, header metadata)."""
    raw = Path(path).read_bytes()
    if len(raw) < 14:
        raise CorruptFileError(f"{path}: truncated checkpoint")
    body, (crc_stored,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CorruptFileError(f"{path}: CRC mismatch")
    if body[:4] != CKPT_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {body[:4]!r}")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != CKPT_VERSION:
        raise CorruptFileError(f"{path}: unsupported checkpoint version {version}")
    (hdr_len,) = struct.unpack_from("<I", body, 6)
    off = 10
    header = json.loads(body[off:off + hdr_len].decode("utf-8"))
    off += hdr_len

    cfg_dict = dict(header["config"])
    cfg_dict["transmil"] = TransmilConfig(**cfg_dict["transmil"])
    config = HeadConfig(**cfg_dict)
    head = build_head(config, Rng(header["seed"]), dtype=dtype)
    expected = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    actual = [(n, t.shape) for n, t in head.named_parameters()]
    if expected != actual:
        raise CorruptFileError(f"{path}: parameter manifest does not match architecture")
    for name, _ in expected:
        t = head.params[name]
        blob = np.frombuffer(body, dtype="<f4", count=t.size, offset=off).reshape(t.shape)
        t.data = np.ascontiguousarray(blob.astype(dtype))
        off += 4 * t.size
    if off != len(body):
        raise CorruptFileError(f"{path}: {len(body) - off} trailing bytes")
    return head, header
