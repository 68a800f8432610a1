"""Binary PPM (P6) images and PGM (P5) masks."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _read_header(buf: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    if not buf.startswith(magic):
        raise ValueError(f"{path}: expected {magic.decode()} header")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: malformed header")
        fields.append(int(buf[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    return w, h, maxval, pos + 1


def read_ppm(path) -> np.ndarray:
    """Return uint8 [H, W, 3]."""
    buf = Path(path).read_bytes()
    w, h, _, off = _read_header(buf, b"P6", path)
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=off) if len(buf) >= off + w * h * 3 else None
    if data is None:
        raise ValueError(f"{path}: truncated raster")
    return data.reshape(h, w, 3).copy()


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm expects uint8 [H,W,3], got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes())


def read_pgm_mask(path) -> np.ndarray:
    """Read a P5 mask and binarize at 128 (>= 128 -> 1 = preserve)."""
    buf = Path(path).read_bytes()
    w, h, _, off = _read_header(buf, b"P5", path)
    if len(buf) < off + w * h:
        raise ValueError(f"{path}: truncated raster")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=off).reshape(h, w)
    return (data >= 128).astype(np.uint8)


def write_pgm_mask(path, m: np.ndarray) -> None:
    m = np.asarray(m)
    h, w = m.shape
    raster = np.where(m > 0, 255, 0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + raster.tobytes())


def to_unit(img: np.ndarray) -> np.ndarray:
    """uint8 [H,W,3] -> float32 [3,H,W] in [-1, 1] via v = byte/127.5 - 1."""
    return (np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def to_bytes(x: np.ndarray) -> np.ndarray:
    """float [3,H,W] in [-1, 1] -> uint8 [H,W,3]."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip(np.rint((x + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0).copy()
