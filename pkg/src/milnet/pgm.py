"""8-bit grayscale image files.

Two formats are supported: binary PGM (magic ``P5``, maxval 255) and raw
row-major byte files accompanied by a sidecar ``<path>.dims`` text file whose
single line is ``W H``.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["read_pgm", "write_pgm", "load_gray_image", "read_image_size"]


def write_pgm(path: str, pixels: np.ndarray) -> None:
    """Write a 2-D uint8 array as a binary (P5) PGM with maxval 255."""
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def _read_pgm_header(f) -> tuple[int, int, int, int]:
    """Parse a P5 header; returns (width, height, maxval, data offset)."""
    data = f.read()
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM (missing P5 magic)")
    # header tokens may be separated by any whitespace and '#' comments
    tokens: list[int] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = tokens
    return w, h, maxval, pos


def read_pgm(path: str) -> np.ndarray:
    """Read a binary (P5) PGM into a 2-D uint8 array."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (missing P5 magic)")
    import io

    w, h, maxval, offset = _read_pgm_header(io.BytesIO(raw))
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    if len(raw) - offset < w * h:
        raise ValueError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=offset)
    return pixels.reshape(h, w).copy()


def _read_raw(path: str) -> np.ndarray:
    dims_path = path + ".dims"
    if not os.path.exists(dims_path):
        raise ValueError(
            f"{path}: not a PGM and no sidecar dimensions file {dims_path}"
        )
    with open(dims_path, "r", encoding="ascii") as f:
        parts = f.read().split()
    if len(parts) != 2:
        raise ValueError(f"{dims_path}: expected a single 'W H' line")
    w, h = int(parts[0]), int(parts[1])
    pixels = np.fromfile(path, dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError(
            f"{path}: raw file holds {pixels.size} bytes, dimensions say {w * h}"
        )
    return pixels.reshape(h, w)


def load_gray_image(path: str) -> np.ndarray:
    """Load a grayscale image (PGM or raw+sidecar) as a 2-D uint8 array."""
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic == b"P5":
        return read_pgm(path)
    return _read_raw(path)


def read_image_size(path: str) -> tuple[int, int]:
    """Return (width, height) without loading pixel data."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic == b"P5":
            f.seek(0)
            w, h, _, _ = _read_pgm_header(f)
            return w, h
    dims_path = path + ".dims"
    if not os.path.exists(dims_path):
        raise ValueError(f"{path}: not a PGM and no sidecar {dims_path}")
    with open(dims_path, "r", encoding="ascii") as f:
        parts = f.read().split()
    return int(parts[0]), int(parts[1])
