"""Binary persistence formats.

Weights:  magic "DMWM", u32 version, u64 parameter count, then per parameter
          u32 name length + utf-8 name, u32 rank, u64 extents, raw little-
          endian float64 values. Round trips are bit-exact.
Keys:     magic "DMKEY", u32 version, f64 gamma_kappa, u64 seed, u32 rank,
          u64 extents, raw float64 kappa values, f64 divergence_score.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import RejectedInput

WEIGHTS_MAGIC = b"DMWM"
KEY_MAGIC = b"DMKEY"
FORMAT_VERSION = 1


def save_weights(path, named_params: dict) -> None:
    """Write an ordered name->array mapping (arrays coerced to float64)."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(named_params)))
        for name, arr in named_params.items():
            data = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            for extent in data.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(data.astype("<f8").tobytes())


def load_weights(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise RejectedInput(f"{path}: not a weight file (bad magic)")
    off = 4
    version, = struct.unpack_from("<I", blob, off)
    off += 4
    if version != FORMAT_VERSION:
        raise RejectedInput(f"{path}: unsupported weight format version {version}")
    count, = struct.unpack_from("<Q", blob, off)
    off += 8
    out = {}
    for _ in range(count):
        nlen, = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        rank, = struct.unpack_from("<I", blob, off)
        off += 4
        shape = []
        for _ in range(rank):
            extent, = struct.unpack_from("<Q", blob, off)
            off += 8
            shape.append(extent)
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        out[name] = arr.astype(np.float64)
    return out


def save_key(path, kappa: np.ndarray, gamma_kappa: float, seed: int,
             divergence_score: float) -> None:
    data = np.ascontiguousarray(kappa, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(KEY_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<d", float(gamma_kappa)))
        fh.write(struct.pack("<Q", int(seed)))
        fh.write(struct.pack("<I", data.ndim))
        for extent in data.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(data.astype("<f8").tobytes())
        fh.write(struct.pack("<d", float(divergence_score)))


def load_key(path):
    """Return (kappa, gamma_kappa, seed, divergence_score)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != KEY_MAGIC:
        raise RejectedInput(f"{path}: not a key file (bad magic)")
    off = 5
    version, = struct.unpack_from("<I", blob, off)
    off += 4
    if version != FORMAT_VERSION:
        raise RejectedInput(f"{path}: unsupported key format version {version}")
    gamma, = struct.unpack_from("<d", blob, off)
    off += 8
    seed, = struct.unpack_from("<Q", blob, off)
    off += 8
    rank, = struct.unpack_from("<I", blob, off)
    off += 4
    shape = []
    for _ in range(rank):
        extent, = struct.unpack_from("<Q", blob, off)
        off += 8
        shape.append(extent)
    n = int(np.prod(shape)) if shape else 1
    kappa = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
    off += 8 * n
    score, = struct.unpack_from("<d", blob, off)
    return kappa.astype(np.float64), float(gamma), int(seed), float(score)
