"""Shape/color transformation of the watermark image.

The transform is optimized to make the watermark's deep features dissimilar
(cosine toward -1) while keeping the pixels structurally similar (SSIM
toward 1): minimize lambda_cos * cos(theta) - lambda_ssim * SSIM. Gradients
flow through the bilinear warp, the color map, the SSIM window statistics,
and the frozen feature extractor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .errors import RejectedInput, ShapeError
from .nets import FeatureExtractor

DET_RANGE = (0.5, 2.0)
GAIN_RANGE = (0.5, 1.5)
OFFSET_RANGE = (-0.3, 0.3)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class TransformParams:
    """Affine (2x2 + translation, about image center) plus per-channel color."""

    affine: np.ndarray  # (6,): [a, b, c, d, ty, tx]; rows map (yc, xc) -> src
    gain: np.ndarray    # (C,)
    offset: np.ndarray  # (C,)

    def __post_init__(self):
        self.affine = np.asarray(self.affine, dtype=np.float64).reshape(6)
        self.gain = np.asarray(self.gain, dtype=np.float64).reshape(-1)
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(-1)
        if self.gain.shape != self.offset.shape:
            raise RejectedInput("gain and offset must have one entry per channel")

    @property
    def det(self) -> float:
        a, b, c, d = self.affine[:4]
        return float(a * d - b * c)

    def in_box(self) -> bool:
        return (DET_RANGE[0] <= self.det <= DET_RANGE[1]
                and np.all(self.gain >= GAIN_RANGE[0]) and np.all(self.gain <= GAIN_RANGE[1])
                and np.all(self.offset >= OFFSET_RANGE[0]) and np.all(self.offset <= OFFSET_RANGE[1]))

    def flat(self) -> np.ndarray:
        """6 + 2C values in a fixed order (affine, gains, offsets)."""
        return np.concatenate([self.affine, self.gain, self.offset])

    @staticmethod
    def identity(channels: int = 1) -> "TransformParams":
        return TransformParams(affine=np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
                               gain=np.ones(channels), offset=np.zeros(channels))

    @staticmethod
    def from_flat(values, channels: int) -> "TransformParams":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size != 6 + 2 * channels:
            raise RejectedInput(f"expected {6 + 2 * channels} values, got {values.size}")
        return TransformParams(affine=values[:6], gain=values[6:6 + channels],
                               offset=values[6 + channels:])


@dataclass
class ObjectiveWeights:
    lambda_cos: float = 1.0
    lambda_ssim: float = 1.0

    def __post_init__(self):
        if self.lambda_cos < 0 or self.lambda_ssim < 0:
            raise RejectedInput("objective weights must be >= 0")
        if self.lambda_cos == 0 and self.lambda_ssim == 0:
            raise RejectedInput("at least one objective weight must be positive")


# ---------------------------------------------------------------------------
# Differentiable affine warp (custom op: gradient w.r.t. the 6 affine values)
# ---------------------------------------------------------------------------


def _reflect(coords: np.ndarray, n: int):
    """Mirror coordinates into [0, n-1] (reflect-101); returns (coords, slope)."""
    if n == 1:
        return np.zeros_like(coords), np.zeros_like(coords)
    period = 2.0 * (n - 1)
    wrapped = np.mod(coords, period)
    over = wrapped > (n - 1)
    out = np.where(over, period - wrapped, wrapped)
    slope = np.where(over, -1.0, 1.0)
    return out, slope


def _warp_forward(img: np.ndarray, theta: np.ndarray):
    """Returns warped image plus everything the VJP needs."""
    C, H, W = img.shape
    a, b, c, d, ty, tx = theta
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    yc, xc = yy - cy, xx - cx
    sy = a * yc + b * xc + ty + cy
    sx = c * yc + d * xc + tx + cx
    ry, sly = _reflect(sy, H)
    rx, slx = _reflect(sx, W)
    y0 = np.floor(ry).astype(np.int64)
    x0 = np.floor(rx).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = ry - y0
    fx = rx - x0
    i00 = img[:, y0, x0]
    i01 = img[:, y0, x1]
    i10 = img[:, y1, x0]
    i11 = img[:, y1, x1]
    top = i00 * (1 - fx) + i01 * fx
    bot = i10 * (1 - fx) + i11 * fx
    out = top * (1 - fy) + bot * fy
    # Interpolant partials w.r.t. the (unreflected) source coordinates.
    dgy = (bot - top) * sly
    dgx = ((i01 - i00) * (1 - fy) + (i11 - i10) * fy) * slx
    return out, (yc, xc, dgy, dgx)


def affine_warp(image: np.ndarray, theta: Tensor) -> Tensor:
    """Bilinear inverse-warp of a constant (C, H, W) image by affine params.

    Differentiable in theta only; the image is treated as a constant.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"affine_warp expects (C, H, W), got {img.shape}")
    theta = ad.as_tensor(theta)
    if theta.data.shape != (6,):
        raise ShapeError(f"affine params must have shape (6,), got {theta.data.shape}")
    a, b, c, d = theta.data[:4]
    if abs(a * d - b * c) < 1e-8:
        raise RejectedInput("singular affine transform")
    out, (yc, xc, dgy, dgx) = _warp_forward(img, theta.data)

    def vjp(g):
        gy = (g * dgy).sum(axis=0)
        gx = (g * dgx).sum(axis=0)
        return (np.array([
            (gy * yc).sum(), (gy * xc).sum(),
            (gx * yc).sum(), (gx * xc).sum(),
            gy.sum(), gx.sum(),
        ]),)

    return ad.make_op(out, (theta,), vjp, "affine_warp")


def _color_map(warped: Tensor, gain: Tensor, offset: Tensor) -> Tensor:
    C = gain.data.size
    g = ad.reshape(gain, (C, 1, 1))
    o = ad.reshape(offset, (C, 1, 1))
    return ad.clamp(ad.add(ad.mul(warped, g), o), 0.0, 1.0)


def apply_transform(image: np.ndarray, params: TransformParams) -> np.ndarray:
    """Warp + per-channel gain/offset + clamp to [0, 1].

    Accepts any non-singular affine; the invariant box (determinant, gain,
    offset ranges) is enforced where the objective is evaluated, not here.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    if img.shape[0] != params.gain.size:
        raise RejectedInput(f"params carry {params.gain.size} channels, image has {img.shape[0]}")
    with ad.no_grad():
        warped = affine_warp(img, Tensor(params.affine))
        out = _color_map(warped, Tensor(params.gain), Tensor(params.offset)).data
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    xs = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k = k / k.sum()
    return np.outer(k, k)


def _ssim_tensor(x: Tensor, y: Tensor) -> Tensor:
    """Mean local SSIM over valid window positions, channel-averaged."""
    C, H, W = x.data.shape
    size = min(SSIM_WINDOW, H if H % 2 else H - 1, W if W % 2 else W - 1)
    win = _gaussian_window(size, SSIM_SIGMA)
    w = Tensor(win[None, None])
    vals = []
    for ch in range(C):
        if C == 1:
            xa = ad.reshape(x, (1, 1, H, W))
            ya = ad.reshape(y, (1, 1, H, W))
        else:
            xa = ad.reshape(_select_channel(x, ch), (1, 1, H, W))
            ya = ad.reshape(_select_channel(y, ch), (1, 1, H, W))
        mu_x = ad.conv2d(xa, w)
        mu_y = ad.conv2d(ya, w)
        xx = ad.conv2d(ad.mul(xa, xa), w)
        yy = ad.conv2d(ad.mul(ya, ya), w)
        xy = ad.conv2d(ad.mul(xa, ya), w)
        mu_x2 = ad.mul(mu_x, mu_x)
        mu_y2 = ad.mul(mu_y, mu_y)
        mu_xy = ad.mul(mu_x, mu_y)
        var_x = ad.sub(xx, mu_x2)
        var_y = ad.sub(yy, mu_y2)
        cov = ad.sub(xy, mu_xy)
        num = ad.mul(ad.add(ad.mul(mu_xy, 2.0), SSIM_C1),
                     ad.add(ad.mul(cov, 2.0), SSIM_C2))
        den = ad.mul(ad.add(ad.add(mu_x2, mu_y2), SSIM_C1),
                     ad.add(ad.add(var_x, var_y), SSIM_C2))
        vals.append(ad.tmean(ad.div(num, den)))
    total = vals[0]
    for v in vals[1:]:
        total = ad.add(total, v)
    return ad.mul(total, 1.0 / C)


def _select_channel(x: Tensor, ch: int) -> Tensor:
    C, H, W = x.data.shape
    flat = ad.reshape(x, (C, H * W))
    return ad.reshape(ad.select_row(flat, ch), (H, W))


def _to_unit_range(a: np.ndarray, b: np.ndarray):
    # Rescale [-1, 1] inputs to [0, 1]; [0, 1] inputs pass through.
    if min(a.min(), b.min()) < 0.0:
        return (a + 1.0) / 2.0, (b + 1.0) / 2.0
    return a, b


def ssim(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5)."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise RejectedInput(f"ssim: shapes {a.shape} != {b.shape}")
    a, b = _to_unit_range(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    with ad.no_grad():
        return float(_ssim_tensor(Tensor(a), Tensor(b)).data)


# ---------------------------------------------------------------------------
# Feature cosine
# ---------------------------------------------------------------------------


def _cosine_of(u: Tensor, v: Tensor) -> Tensor:
    dot = ad.tsum(ad.mul(u, v))
    nu = ad.powf(ad.tsum(ad.mul(u, u)), 0.5)
    nv = ad.powf(ad.tsum(ad.mul(v, v)), 0.5)
    return ad.div(dot, ad.mul(nu, nv))


def cosine_vectors(u: np.ndarray, v: np.ndarray):
    """Cosine of two plain vectors; zero-norm inputs are degenerate -> 0."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0, True
    return float(np.dot(u, v) / (nu * nv)), False


def cosine_features_flagged(image_a, image_b, fx: FeatureExtractor):
    """(cosine of pooled features, degenerate flag)."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise RejectedInput(f"cosine_features: shapes {a.shape} != {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    with ad.no_grad():
        fa = fx(Tensor(a[None])).data[0]
        fb = fx(Tensor(b[None])).data[0]
    return cosine_vectors(fa, fb)


def cosine_features(image_a, image_b, fx: FeatureExtractor) -> float:
    return cosine_features_flagged(image_a, image_b, fx)[0]


# ---------------------------------------------------------------------------
# Objective + optimizer
# ---------------------------------------------------------------------------


def _objective_tensor(io_img: np.ndarray, io_feat: np.ndarray, theta: Tensor,
                      gain: Tensor, offset: Tensor, weights: ObjectiveWeights,
                      fx: FeatureExtractor) -> Tensor:
    transformed = _color_map(affine_warp(io_img, theta), gain, offset)
    C, H, W = io_img.shape
    feat = ad.reshape(fx(ad.reshape(transformed, (1, C, H, W))), (-1,))
    cos = _cosine_of(Tensor(io_feat), feat)
    s = _ssim_tensor(Tensor(io_img), transformed)
    return ad.sub(ad.mul(cos, weights.lambda_cos), ad.mul(s, weights.lambda_ssim))


def objective(image, params: TransformParams, weights: ObjectiveWeights,
              fx: FeatureExtractor) -> float:
    """lambda_cos * cos(features) - lambda_ssim * SSIM for the given params."""
    if not params.in_box():
        raise RejectedInput("transform params outside the invariant box")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    with ad.no_grad():
        feat = fx(Tensor(img[None])).data[0]
        val = _objective_tensor(img, feat, Tensor(params.affine), Tensor(params.gain),
                                Tensor(params.offset), weights, fx)
    return float(val.data)


def _project(theta: np.ndarray, gain: np.ndarray, offset: np.ndarray):
    gain = np.clip(gain, GAIN_RANGE[0], GAIN_RANGE[1])
    offset = np.clip(offset, OFFSET_RANGE[0], OFFSET_RANGE[1])
    theta = theta.copy()
    m = theta[:4]
    det = m[0] * m[3] - m[1] * m[2]
    # Rescale targets sit a hair inside the box so rounding can't leave it.
    lo = DET_RANGE[0] * (1.0 + 1e-9)
    hi = DET_RANGE[1] * (1.0 - 1e-9)
    if det <= 0:
        # Blend toward identity until the determinant re-enters the box.
        ident = np.array([1.0, 0.0, 0.0, 1.0])
        lo_s, hi_s = 0.0, 1.0
        for _ in range(60):
            mid = (lo_s + hi_s) / 2.0
            mm = (1 - mid) * m + mid * ident
            if mm[0] * mm[3] - mm[1] * mm[2] >= lo:
                hi_s = mid
            else:
                lo_s = mid
        m = (1 - hi_s) * m + hi_s * ident
    else:
        if det < lo:
            m = m * np.sqrt(lo / det)
        elif det > hi:
            m = m * np.sqrt(hi / det)
    theta[:4] = m
    return theta, gain, offset


def optimize_transform(image, weights: ObjectiveWeights, fx: FeatureExtractor,
                       budget: int = 200, rng: RngStream | None = None,
                       restarts: int = 4, lr: float = 0.02):
    """Projected gradient descent with restarts biased away from identity.

    budget is the total number of gradient steps, split across restarts.
    Returns (best TransformParams, accepted-objective trace). The trace
    tracks the best objective seen so far, so it is non-increasing.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    C = img.shape[0]
    rng = rng or RngStream(0)
    identity = TransformParams.identity(C)
    best_params = identity
    best_obj = objective(img, identity, weights, fx)
    trace = [best_obj]
    if budget <= 0:
        return best_params, np.array(trace)
    with ad.no_grad():
        io_feat = fx(Tensor(img[None])).data[0]
    steps_each = max(1, budget // max(restarts, 1))
    for _ in range(restarts):
        theta = identity.affine + np.concatenate([
            0.15 * rng.gaussian((4,)), 0.8 * rng.gaussian((2,))])
        gain = np.clip(1.0 + 0.2 * rng.gaussian((C,)), *GAIN_RANGE)
        offset = np.clip(0.1 * rng.gaussian((C,)), *OFFSET_RANGE)
        theta, gain, offset = _project(theta, gain, offset)
        cur = None
        step_lr = lr
        for _ in range(steps_each):
            t_t = Tensor(theta, requires_grad=True)
            g_t = Tensor(gain, requires_grad=True)
            o_t = Tensor(offset, requires_grad=True)
            obj = _objective_tensor(img, io_feat, t_t, g_t, o_t, weights, fx)
            ad.backward(obj)
            if cur is None:
                cur = float(obj.data)
                if cur < best_obj:
                    best_obj = cur
                    best_params = TransformParams(theta.copy(), gain.copy(), offset.copy())
            nt, ng, no = _project(theta - step_lr * t_t.grad,
                                  gain - step_lr * g_t.grad,
                                  offset - step_lr * o_t.grad)
            with ad.no_grad():
                nobj = float(_objective_tensor(img, io_feat, Tensor(nt), Tensor(ng),
                                               Tensor(no), weights, fx).data)
            if nobj < cur:
                theta, gain, offset, cur = nt, ng, no, nobj
                step_lr = min(step_lr * 1.2, 0.2)
                if cur < best_obj:
                    best_obj = cur
                    best_params = TransformParams(theta.copy(), gain.copy(), offset.copy())
            else:
                step_lr *= 0.5
            trace.append(best_obj)
    return best_params, np.array(trace)


def default_feature_extractor(seed: int = 2024, channels: int = 1) -> FeatureExtractor:
    return FeatureExtractor(seed=seed, channels=channels)
