"""Binary PPM (P6) and PGM (P5) reading and writing, maxval 255.

The writers emit a minimal canonical header so files regenerate
byte-identically; the readers accept any spec-conforming header including
comment lines.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected a (h, w, 3) uint8 array, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"expected a (h, w) uint8 array, got {gray.shape} {gray.dtype}")
    h, w = gray.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + gray.tobytes())


def _read_header(blob: bytes, magic: bytes):
    if blob[:2] != magic:
        raise ValueError(f"bad magic {blob[:2]!r}, expected {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    return w, h, pos


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    w, h, pos = _read_header(blob, b"P6")
    data = blob[pos : pos + w * h * 3]
    if len(data) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    w, h, pos = _read_header(blob, b"P5")
    data = blob[pos : pos + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
