"""Binary PGM (P5) reader/writer, 8-bit, one droplet image per file."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    """Write a 2-D array as binary PGM with maxval 255.

    Float input is rounded and clipped into [0, 255]; integer input must
    already fit in a byte.
    """
    a = np.asarray(pixels)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {a.shape}")
    if np.issubdtype(a.dtype, np.floating):
        a = np.rint(np.clip(a, 0.0, 255.0)).astype(np.uint8)
    else:
        if a.min() < 0 or a.max() > 255:
            raise ValueError("integer pixel values outside [0, 255]")
        a = a.astype(np.uint8)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(a.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM (P5, maxval <= 255) into a uint8 array."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # Header tokens (width, height, maxval) separated by whitespace, with
    # optional '#' comment lines.
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            eol = data.find(b"\n", pos)
            pos = len(data) if eol < 0 else eol + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported (maxval {maxval})")
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise ValueError(f"{path}: raster truncated")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()
