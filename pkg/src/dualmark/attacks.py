"""Evaluation-time image attacks.

All attacks are pure functions of (image, spec) on [0, 1] grayscale or
multi-channel arrays and preserve the input shape: rotation fills borders by
reflection, crop resizes back bilinearly, compression is the 8x8 DCT +
quantization core of JPEG without entropy coding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RejectedInput

KINDS = ("identity", "rotation", "blur", "texture", "compress", "crop", "flip")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    angle: float = 0.0          # rotation, degrees in (-180, 180]
    sigma: float = 1.0          # blur
    kernel: int = 5             # blur, odd
    strength: float = 0.8       # texture reduction blend in [0, 1]
    quality: int = 50           # compression in [1, 100]
    keep: float = 0.8           # crop fraction in (0, 1]
    direction: str = "h"        # flip: h | v

    def validate(self) -> "AttackSpec":
        if self.kind not in KINDS:
            raise RejectedInput(f"unknown attack kind '{self.kind}'")
        if self.kind == "rotation" and not -180.0 < self.angle <= 180.0:
            raise RejectedInput(f"rotation angle {self.angle} outside (-180, 180]")
        if self.kind == "blur" and (self.sigma <= 0 or self.kernel % 2 == 0):
            raise RejectedInput("blur needs sigma > 0 and an odd kernel")
        if self.kind == "texture" and not 0.0 <= self.strength <= 1.0:
            raise RejectedInput(f"texture strength {self.strength} outside [0, 1]")
        if self.kind == "compress" and not 1 <= self.quality <= 100:
            raise RejectedInput(f"compression quality {self.quality} outside [1, 100]")
        if self.kind == "crop" and not 0.0 < self.keep <= 1.0:
            raise RejectedInput(f"crop keep {self.keep} outside (0, 1]")
        if self.kind == "flip" and self.direction not in ("h", "v"):
            raise RejectedInput(f"flip direction '{self.direction}' not h|v")
        return self

    def label(self) -> str:
        if self.kind == "identity":
            return "identity"
        if self.kind == "rotation":
            return f"rotation:{self.angle:g}"
        if self.kind == "blur":
            return f"blur:{self.sigma:g}:{self.kernel}"
        if self.kind == "texture":
            return f"texture:{self.strength:g}"
        if self.kind == "compress":
            return f"compress:{self.quality}"
        if self.kind == "crop":
            return f"crop:{self.keep:g}"
        return f"flip:{self.direction}"


def parse_attack(text: str) -> AttackSpec:
    """Parse CLI strings like 'rotation:10', 'blur:1.0:5', 'flip:h'."""
    parts = text.strip().split(":")
    kind = parts[0]
    try:
        if kind == "identity":
            return AttackSpec("identity").validate()
        if kind == "rotation":
            return AttackSpec("rotation", angle=float(parts[1])).validate()
        if kind == "blur":
            return AttackSpec("blur", sigma=float(parts[1]),
                              kernel=int(parts[2]) if len(parts) > 2 else 5).validate()
        if kind == "texture":
            return AttackSpec("texture", strength=float(parts[1])).validate()
        if kind == "compress":
            return AttackSpec("compress", quality=int(parts[1])).validate()
        if kind == "crop":
            return AttackSpec("crop", keep=float(parts[1])).validate()
        if kind == "flip":
            return AttackSpec("flip", direction=parts[1] if len(parts) > 1 else "h").validate()
    except (IndexError, ValueError) as exc:
        raise RejectedInput(f"cannot parse attack '{text}': {exc}") from exc
    raise RejectedInput(f"unknown attack kind '{kind}'")


def attack_grid() -> list:
    """The default 7-entry grid mirroring one column per attack type."""
    return [
        AttackSpec("identity"),
        AttackSpec("rotation", angle=10.0),
        AttackSpec("blur", sigma=1.0, kernel=5),
        AttackSpec("texture", strength=0.8),
        AttackSpec("compress", quality=50),
        AttackSpec("crop", keep=0.8),
        AttackSpec("flip", direction="h"),
    ]


# ---------------------------------------------------------------------------
# Primitives (all reflect-padded so constants stay constant)
# ---------------------------------------------------------------------------


def _per_channel(img: np.ndarray, fn):
    if img.ndim == 2:
        return fn(img)
    return np.stack([fn(img[c]) for c in range(img.shape[0])])


def _reflect_coords(coords: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(coords)
    period = 2.0 * (n - 1)
    wrapped = np.mod(coords, period)
    return np.where(wrapped > (n - 1), period - wrapped, wrapped)


def _bilinear_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    H, W = img.shape
    sy = _reflect_coords(sy, H)
    sx = _reflect_coords(sx, W)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = sy - y0
    fx = sx - x0
    return (img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x1] * (1 - fy) * fx
            + img[y1, x0] * fy * (1 - fx) + img[y1, x1] * fy * fx)


def rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the center, bilinear, reflect fill."""
    def one(ch):
        H, W = ch.shape
        cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
        rad = np.deg2rad(angle_deg)
        cos, sin = np.cos(rad), np.sin(rad)
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        yc, xc = yy - cy, xx - cx
        sy = cos * yc + sin * xc + cy
        sx = -sin * yc + cos * xc + cx
        return _bilinear_sample(ch, sy, sx)
    return _per_channel(img, one)


def _gauss_kernel1d(sigma: float, size: int) -> np.ndarray:
    xs = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float, kernel: int) -> np.ndarray:
    k = _gauss_kernel1d(sigma, kernel)
    pad = kernel // 2

    def one(ch):
        padded = np.pad(ch, pad, mode="reflect")
        tmp = np.zeros_like(ch)
        for i, kv in enumerate(k):
            tmp += kv * padded[pad:pad + ch.shape[0], i:i + ch.shape[1]]
        padded = np.pad(tmp, pad, mode="reflect")
        out = np.zeros_like(ch)
        for i, kv in enumerate(k):
            out += kv * padded[i:i + ch.shape[0], pad:pad + ch.shape[1]]
        return out
    return _per_channel(img, one)


def median_filter5(img: np.ndarray) -> np.ndarray:
    def one(ch):
        padded = np.pad(ch, 2, mode="reflect")
        H, W = ch.shape
        stack = np.empty((25, H, W))
        idx = 0
        for dy in range(5):
            for dx in range(5):
                stack[idx] = padded[dy:dy + H, dx:dx + W]
                idx += 1
        return np.median(stack, axis=0)
    return _per_channel(img, one)


def texture_reduction(img: np.ndarray, strength: float) -> np.ndarray:
    return (1.0 - strength) * img + strength * median_filter5(img)


_DCT8 = None


def _dct_matrix() -> np.ndarray:
    global _DCT8
    if _DCT8 is None:
        n = 8
        m = np.zeros((n, n))
        for k in range(n):
            c = np.sqrt(1.0 / n) if k == 0 else np.sqrt(2.0 / n)
            m[k] = c * np.cos((2 * np.arange(n) + 1) * k * np.pi / (2 * n))
        _DCT8 = m
    return _DCT8


# Standard luminance quantization table.
LUMA_QUANT = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def quant_table(quality: int) -> np.ndarray:
    """libjpeg-style quality scaling of the luminance table."""
    if quality < 50:
        s = 5000.0 / quality
    else:
        s = 200.0 - 2.0 * quality
    return np.clip(np.floor((LUMA_QUANT * s + 50.0) / 100.0), 1, 255)


def dct_compress(img: np.ndarray, quality: int) -> np.ndarray:
    """8x8 block DCT, quantize, dequantize, inverse; per channel."""
    q = quant_table(quality)
    d = _dct_matrix()

    def one(ch):
        H, W = ch.shape
        ph = (-H) % 8
        pw = (-W) % 8
        padded = np.pad(ch, ((0, ph), (0, pw)), mode="reflect") * 255.0 - 128.0
        Hp, Wp = padded.shape
        blocks = padded.reshape(Hp // 8, 8, Wp // 8, 8).transpose(0, 2, 1, 3)
        coef = np.einsum("ij,abjk,lk->abil", d, blocks, d)
        coef = np.round(coef / q) * q
        rec = np.einsum("ji,abjk,kl->abil", d, coef, d)
        out = rec.transpose(0, 2, 1, 3).reshape(Hp, Wp)
        return np.clip((out[:H, :W] + 128.0) / 255.0, 0.0, 1.0)
    return _per_channel(img, one)


def center_crop_resize(img: np.ndarray, keep: float) -> np.ndarray:
    def one(ch):
        H, W = ch.shape
        h = max(1, int(round(H * keep)))
        w = max(1, int(round(W * keep)))
        top = (H - h) // 2
        left = (W - w) // 2
        window = ch[top:top + h, left:left + w]
        if (h, w) == (H, W):
            return window.copy()
        sy = (np.arange(H) + 0.5) * h / H - 0.5
        sx = (np.arange(W) + 0.5) * w / W - 0.5
        sy = np.clip(sy, 0, h - 1)
        sx = np.clip(sx, 0, w - 1)
        return _bilinear_sample(window, sy[:, None] * np.ones(W)[None, :],
                                np.ones(H)[:, None] * sx[None, :])
    return _per_channel(img, one)


def flip(img: np.ndarray, direction: str) -> np.ndarray:
    axis = -1 if direction == "h" else -2
    return np.flip(img, axis=axis).copy()


def apply_attack(image: np.ndarray, spec: AttackSpec, rng=None) -> np.ndarray:
    """Apply one attack; deterministic (the default grid consumes no rng)."""
    spec.validate()
    img = np.asarray(image, dtype=np.float64)
    if spec.kind == "identity":
        return img.copy()
    if spec.kind == "rotation":
        if spec.angle == 0.0:
            return img.copy()
        return rotate(img, spec.angle)
    if spec.kind == "blur":
        return gaussian_blur(img, spec.sigma, spec.kernel)
    if spec.kind == "texture":
        return texture_reduction(img, spec.strength)
    if spec.kind == "compress":
        return dct_compress(img, spec.quality)
    if spec.kind == "crop":
        return center_crop_resize(img, spec.keep)
    return flip(img, spec.direction)
