"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _encode(magic: bytes, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise TypeError(f"netpbm arrays must be uint8, got {arr.dtype}")
    h, w = arr.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def write_pgm(path, gray: np.ndarray) -> None:
    """``gray`` is ``[H, W]`` uint8."""
    if gray.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got {gray.shape}")
    Path(path).write_bytes(_encode(b"P5", gray))


def write_ppm(path, rgb: np.ndarray) -> None:
    """``rgb`` is ``[H, W, 3]`` uint8."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs an [H, W, 3] array, got {rgb.shape}")
    Path(path).write_bytes(_encode(b"P6", rgb))


def _tokens(blob: bytes, count: int):
    out, pos = [], 2
    while len(out) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        out.append(int(blob[start:pos]))
    return out, pos + 1


def read_netpbm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm magic {magic!r}")
    (w, h, maxval), pos = _tokens(blob, 3)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    channels = 3 if magic == b"P6" else 1
    data = blob[pos:pos + w * h * channels]
    if len(data) != w * h * channels:
        raise ValueError(f"{path}: pixel data truncated")
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr.reshape(h, w, 3).copy() if channels == 3 else arr.reshape(h, w).copy()
