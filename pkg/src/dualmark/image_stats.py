"""Eleven per-image statistics and the corpus comparison protocol.

All statistics operate on [0, 1] images ((H, W) grayscale or (3, H, W) RGB;
RGB collapses to luminance Y = 0.299R + 0.587G + 0.114B where a single
channel is needed). Filters use reflect padding. Several statistics are
computed on a 0-255 scale so magnitudes stay commensurate across fields.
"""

from __future__ import annotations

from dataclasses import dataclass, fields as dc_fields

import numpy as np

from .errors import RejectedInput

FIELD_NAMES = (
    "glcm_contrast", "glcm_energy", "canny_edge", "variance_blur",
    "mean_spectrum", "edge_histogram", "entropy", "sharpness",
    "saturation", "texture", "realism",
)


@dataclass
class StatsVector:
    glcm_contrast: float
    glcm_energy: float
    canny_edge: float
    variance_blur: float
    mean_spectrum: float
    edge_histogram: float
    entropy: float
    sharpness: float
    saturation: float
    texture: float
    realism: float

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in dc_fields(self)])

    @staticmethod
    def from_array(values) -> "StatsVector":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size != len(FIELD_NAMES):
            raise RejectedInput(f"expected {len(FIELD_NAMES)} values, got {values.size}")
        return StatsVector(*[float(v) for v in values])


@dataclass
class StatsComparison:
    watermarked_mean: StatsVector
    clean_mean: StatsVector
    difference_pct: np.ndarray
    degenerate: np.ndarray
    mean_difference_pct: float


# ---------------------------------------------------------------------------
# Shared filter helpers
# ---------------------------------------------------------------------------


def _luminance(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    if img.ndim == 3 and img.shape[0] == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    raise RejectedInput(f"expected (H, W), (1, H, W) or (3, H, W), got {img.shape}")


def _conv2_reflect(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    py, px = kh // 2, kw // 2
    padded = np.pad(img, ((py, py), (px, px)), mode="reflect")
    H, W = img.shape
    out = np.zeros_like(img)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * padded[i:i + H, j:j + W]
    return out


def _gaussian_kernel2d(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k = k / k.sum()
    return np.outer(k, k)


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T
_LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def _sobel(img: np.ndarray):
    return _conv2_reflect(img, _SOBEL_X), _conv2_reflect(img, _SOBEL_Y)


# ---------------------------------------------------------------------------
# Individual statistics
# ---------------------------------------------------------------------------


def glcm_features(y: np.ndarray, levels: int = 64):
    """(contrast, energy) of the symmetric co-occurrence distribution.

    Neighbor offsets are one step down and one step right; pairs are counted
    order-insensitively (folded into the upper triangle) and normalized by
    the total pair count.
    """
    q = np.minimum((y * levels).astype(np.int64), levels - 1)
    co = np.zeros((levels, levels))
    for dy, dx in ((1, 0), (0, 1)):
        a = q[:q.shape[0] - dy, :q.shape[1] - dx].reshape(-1)
        b = q[dy:, dx:].reshape(-1)
        np.add.at(co, (np.minimum(a, b), np.maximum(a, b)), 1.0)
    total = co.sum()
    if total == 0:
        return 0.0, 1.0
    p = co / total
    ii, jj = np.indices(p.shape)
    contrast = float((p * (ii - jj) ** 2).sum())
    energy = float((p * p).sum())
    return contrast, energy


def canny_edge_percent(y: np.ndarray) -> float:
    """Percentage of edge pixels: Gaussian 1.4 smoothing, Sobel gradients,
    non-maximum suppression, hysteresis at 0.1/0.3 of the max magnitude."""
    smoothed = _conv2_reflect(y, _gaussian_kernel2d(1.4))
    gx, gy = _sobel(smoothed)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-12:  # flat image up to rounding residue
        return 0.0
    # Non-maximum suppression over 4 quantized orientations.
    angle = np.mod(np.rad2deg(np.arctan2(gy, gx)), 180.0)
    H, W = y.shape
    padded = np.pad(mag, 1, mode="constant")
    n1 = np.zeros_like(mag)
    n2 = np.zeros_like(mag)
    sector = np.zeros(mag.shape, dtype=np.int64)
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3
    core = padded[1:H + 1, 1:W + 1]
    offs = {0: ((0, 1), (0, -1)), 1: ((-1, 1), (1, -1)),
            2: ((1, 0), (-1, 0)), 3: ((1, 1), (-1, -1))}
    for s, ((dy1, dx1), (dy2, dx2)) in offs.items():
        m = sector == s
        n1[m] = padded[1 + dy1:H + 1 + dy1, 1 + dx1:W + 1 + dx1][m]
        n2[m] = padded[1 + dy2:H + 1 + dy2, 1 + dx2:W + 1 + dx2][m]
    keep = (core >= n1) & (core >= n2)
    nms = np.where(keep, mag, 0.0)
    hi = 0.3 * peak
    lo = 0.1 * peak
    strong = nms >= hi
    weak = nms >= lo
    # Hysteresis: flood from strong pixels through weak ones (8-connected).
    edges = strong.copy()
    frontier = list(zip(*np.nonzero(strong)))
    while frontier:
        cy, cx = frontier.pop()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = cy + dy, cx + dx
                if 0 <= ny < H and 0 <= nx < W and weak[ny, nx] and not edges[ny, nx]:
                    edges[ny, nx] = True
                    frontier.append((ny, nx))
    return float(100.0 * edges.sum() / edges.size)


def variance_blur_measure(y: np.ndarray) -> float:
    return float(np.var(_conv2_reflect(y * 255.0, _LAPLACIAN)))


def mean_spectrum(y: np.ndarray) -> float:
    return float(np.mean(np.abs(np.fft.fftshift(np.fft.fft2(y * 255.0)))))


N_ORIENT_BINS = 16


def edge_histogram_count(y: np.ndarray, threshold: float = 0.05) -> float:
    """Number of orientation bins whose magnitude-weighted share exceeds 5%.

    Bins are centered on multiples of 2*pi/16, so a horizontal flip maps bin
    k to bin (8 - k) mod 16 exactly.
    """
    gx, gy = _sobel(y)
    mag = np.hypot(gx, gy)
    total = mag.sum()
    if total <= 1e-12:  # flat image up to rounding residue
        return 0.0
    angle = np.arctan2(gy, gx)
    bins = np.floor((angle + np.pi) / (2 * np.pi / N_ORIENT_BINS) + 0.5).astype(np.int64)
    bins = np.mod(bins, N_ORIENT_BINS)
    hist = np.bincount(bins.reshape(-1), weights=mag.reshape(-1),
                       minlength=N_ORIENT_BINS)
    return float(np.sum(hist > threshold * total))


def edge_orientation_histogram(y: np.ndarray) -> np.ndarray:
    """The underlying 16-bin magnitude-weighted orientation histogram."""
    gx, gy = _sobel(y)
    mag = np.hypot(gx, gy)
    angle = np.arctan2(gy, gx)
    bins = np.floor((angle + np.pi) / (2 * np.pi / N_ORIENT_BINS) + 0.5).astype(np.int64)
    bins = np.mod(bins, N_ORIENT_BINS)
    return np.bincount(bins.reshape(-1), weights=mag.reshape(-1),
                       minlength=N_ORIENT_BINS)


def shannon_entropy(y: np.ndarray) -> float:
    levels = np.minimum((y * 256.0).astype(np.int64), 255)
    hist = np.bincount(levels.reshape(-1), minlength=256).astype(np.float64)
    p = hist[hist > 0] / levels.size
    return float(max(0.0, -(p * np.log2(p)).sum()))


def tenengrad_sharpness(y: np.ndarray) -> float:
    gx, gy = _sobel(y * 255.0)
    return float(np.mean(gx * gx + gy * gy))


def mean_saturation(img: np.ndarray) -> float:
    if img.ndim == 2 or img.shape[0] == 1:
        return 0.0
    maxc = img.max(axis=0)
    minc = img.min(axis=0)
    s = np.where(maxc > 0, (maxc - minc) / np.where(maxc > 0, maxc, 1.0), 0.0)
    return float(255.0 * s.mean())


def local_texture(y: np.ndarray, window: int = 7) -> float:
    pad = window // 2
    padded = np.pad(y * 255.0, pad, mode="reflect")
    H, W = y.shape
    s1 = np.zeros((H, W))
    s2 = np.zeros((H, W))
    for i in range(window):
        for j in range(window):
            block = padded[i:i + H, j:j + W]
            s1 += block
            s2 += block * block
    n = window * window
    var = np.maximum(s2 / n - (s1 / n) ** 2, 0.0)
    return float(np.sqrt(var).mean())


def spectral_realism(y: np.ndarray) -> float:
    """|slope + 2| of the log radially-averaged power spectrum vs log frequency."""
    F = np.fft.fftshift(np.fft.fft2(y))
    power = np.abs(F) ** 2
    H, W = y.shape
    cy, cx = H // 2, W // 2
    yy, xx = np.indices((H, W))
    r = np.rint(np.hypot(yy - cy, xx - cx)).astype(np.int64)
    rmax = min(H, W) // 2
    radii = []
    means = []
    for rad in range(1, rmax + 1):
        mask = r == rad
        if mask.any():
            m = power[mask].mean()
            if m > 0:
                radii.append(rad)
                means.append(m)
    if len(radii) < 2:
        return 0.0  # no usable spectrum (e.g. constant image)
    lx = np.log(np.asarray(radii, dtype=np.float64))
    ly = np.log(np.asarray(means))
    slope = np.polyfit(lx, ly, 1)[0]
    return float(abs(slope + 2.0))


# ---------------------------------------------------------------------------
# Vector, differences, corpora
# ---------------------------------------------------------------------------


def compute_stats_vector(image: np.ndarray) -> StatsVector:
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise RejectedInput("image contains non-finite values")
    y = _luminance(img)
    contrast, energy = glcm_features(y)
    return StatsVector(
        glcm_contrast=contrast,
        glcm_energy=energy,
        canny_edge=canny_edge_percent(y),
        variance_blur=variance_blur_measure(y),
        mean_spectrum=mean_spectrum(y),
        edge_histogram=edge_histogram_count(y),
        entropy=shannon_entropy(y),
        sharpness=tenengrad_sharpness(y),
        saturation=mean_saturation(img),
        texture=local_texture(y),
        realism=spectral_realism(y),
    )


def percent_difference(watermarked: float, clean: float):
    """100 * |w - c| / |w|; (value, degenerate flag), 0 when w == 0."""
    if watermarked == 0.0:
        return 0.0, True
    return float(100.0 * abs(watermarked - clean) / abs(watermarked)), False


def corpus_comparison(watermarked_images, clean_images) -> StatsComparison:
    """Field means over each corpus, then the per-field percentage difference."""
    wm = list(watermarked_images)
    cl = list(clean_images)
    if not wm or not cl:
        raise RejectedInput("corpora must be nonempty")
    wm_mean = np.mean([compute_stats_vector(i).to_array() for i in wm], axis=0)
    cl_mean = np.mean([compute_stats_vector(i).to_array() for i in cl], axis=0)
    return compare_stat_rows(wm_mean, cl_mean)


def compare_stat_rows(wm_mean, cl_mean) -> StatsComparison:
    """Difference-row arithmetic on two precomputed 11-field rows."""
    wm_mean = np.asarray(wm_mean, dtype=np.float64)
    cl_mean = np.asarray(cl_mean, dtype=np.float64)
    diffs = np.zeros(len(FIELD_NAMES))
    degen = np.zeros(len(FIELD_NAMES), dtype=bool)
    for i in range(len(FIELD_NAMES)):
        diffs[i], degen[i] = percent_difference(wm_mean[i], cl_mean[i])
    return StatsComparison(
        watermarked_mean=StatsVector.from_array(wm_mean),
        clean_mean=StatsVector.from_array(cl_mean),
        difference_pct=diffs,
        degenerate=degen,
        mean_difference_pct=float(diffs.mean()),
    )


def stats_csv_header() -> str:
    return ",".join(FIELD_NAMES)
