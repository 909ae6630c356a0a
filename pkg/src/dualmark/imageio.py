"""Binary PGM (P5) / PPM (P6) image files, maxval 255.

Floats in [0, 1] quantize to 0..255 on write; reading returns floats in
[0, 1]. The formats are codec-free, so identical arrays always produce
identical bytes.
"""

from __future__ import annotations

import numpy as np

from .errors import RejectedInput


def _quantize(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Write a grayscale (H, W) float image in [0, 1] as binary PGM."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise RejectedInput(f"write_pgm expects (H, W), got {arr.shape}")
    q = _quantize(arr)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    """Write an RGB (3, H, W) float image in [0, 1] as binary PPM."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise RejectedInput(f"write_ppm expects (3, H, W), got {arr.shape}")
    q = _quantize(arr).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{q.shape[1]} {q.shape[0]}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def _read_header(blob: bytes, path):
    if blob[:2] not in (b"P5", b"P6"):
        raise RejectedInput(f"{path}: not a binary PGM/PPM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":  # comment line
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise RejectedInput(f"{path}: only maxval 255 supported, got {maxval}")
    return blob[:2], width, height, pos


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a (H, W) float array in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, width, height, pos = _read_header(blob, path)
    if magic != b"P5":
        raise RejectedInput(f"{path}: expected PGM (P5), got {magic.decode()}")
    raw = np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=pos)
    return raw.reshape(height, width).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a (3, H, W) float array in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, width, height, pos = _read_header(blob, path)
    if magic != b"P6":
        raise RejectedInput(f"{path}: expected PPM (P6), got {magic.decode()}")
    raw = np.frombuffer(blob, dtype=np.uint8, count=3 * width * height, offset=pos)
    return raw.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def read_image(path) -> np.ndarray:
    """Read PGM or PPM by sniffing the magic; returns (H, W) or (3, H, W)."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P5":
        return read_pgm(path)
    if magic == b"P6":
        return read_ppm(path)
    raise RejectedInput(f"{path}: unknown image format")
