"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes  b"BLDLAB01"
    version      u32
    config_len   u32, then config_len bytes of UTF-8 JSON (sorted keys)
    T            u32, then T float64 betas (empty when T = 0)
    n_tensors    u32, then per tensor:
        name_len u16, name (UTF-8)
        dtype    u8   (0 = float32, 1 = float64)
        ndim     u8,  then ndim u32 extents
        raw little-endian data
    checksum     32 bytes SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule

MAGIC = b"BLDLAB01"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    schedule: NoiseSchedule | None = None


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode()
    parts += [struct.pack("<I", len(cfg)), cfg]
    if ckpt.schedule is None:
        parts.append(struct.pack("<I", 0))
    else:
        betas = np.ascontiguousarray(ckpt.schedule.beta[1:], dtype="<f8")
        parts += [struct.pack("<I", betas.size), betas.tobytes()]
    names = sorted(ckpt.tensors)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(ckpt.tensors[name])
        if arr.dtype not in _CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw,
                  struct.pack("<BB", _CODES[arr.dtype], arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape),
                  np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) + 4 + 32:
        raise CheckpointError("checksum: file too short")
    if buf[:8] != MAGIC:
        raise CheckpointError(f"magic: expected {MAGIC!r}, got {buf[:8]!r}")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum: content does not match stored SHA-256 (corrupt or truncated)")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("shape table: unexpected end of data")
        out = body[pos:pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"version: unsupported {version}, expected {VERSION}")
    (clen,) = struct.unpack("<I", take(4))
    config = json.loads(take(clen).decode())
    (T,) = struct.unpack("<I", take(4))
    schedule = NoiseSchedule(betas=np.frombuffer(take(8 * T), dtype="<f8").copy()) if T else None
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"dtype: unknown code {code} for tensor {name!r}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(body):
        raise CheckpointError("shape table: trailing bytes after tensor table")
    return Checkpoint(tensors, config, schedule)


def save_checkpoint(path, tensors: dict[str, np.ndarray], schedule: NoiseSchedule | None = None,
                    config: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(Checkpoint(dict(tensors), dict(config or {}), schedule)))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
