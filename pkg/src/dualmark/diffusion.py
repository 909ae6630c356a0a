"""Toy pixel-space denoising diffusion model.

Linear-beta schedule, forward noising, noise-prediction loss, ancestral
sampling. The host images are small grayscale tensors in [-1, 1]; at this
scale the latent variable and the image are the same thing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, RngStream, Tensor
from .errors import RejectedInput, ShapeError
from .nets import Denoiser


@dataclass
class NoiseSchedule:
    """Per-timestep coefficients; index t runs 1..T (arrays are 0-based)."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def beta(self, t):
        return self.betas[t - 1]

    def alpha(self, t):
        return self.alphas[t - 1]

    def alpha_bar(self, t):
        return self.alpha_bars[t - 1]

    def sigma(self, t):
        return self.sigmas[t - 1]


def make_schedule(T: int = 100, beta_start: float = 1e-4,
                  beta_end: float = 0.06) -> NoiseSchedule:
    """Linear beta interpolation; sigma_t = sqrt(beta_t).

    The default beta_end is chosen so the terminal abar drops below 0.05 at
    T = 100; ancestral sampling starts from a standard normal, so the forward
    marginal has to actually reach the prior.
    """
    if T < 2:
        raise RejectedInput(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise RejectedInput(f"invalid beta range ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigmas = np.sqrt(betas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars, sigmas=sigmas)


def _check_t(t, T):
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t < 1) or np.any(t > T):
        raise RejectedInput(f"timestep {t} outside [1, {T}]")
    return t


def q_sample(z0, t, eps, schedule: NoiseSchedule):
    """Forward marginal: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.

    t may be a scalar or a per-sample array matching the batch axis; z0 and
    eps must have identical shapes. Works on ndarrays and Tensors alike.
    """
    z0t, epst = ad.as_tensor(z0), ad.as_tensor(eps)
    if z0t.data.shape != epst.data.shape:
        raise ShapeError(f"q_sample: z0 {z0t.data.shape} vs eps {epst.data.shape}")
    t = _check_t(t, schedule.T)
    abar = schedule.alpha_bars[t - 1]
    if t.size == 1:
        c0 = float(np.sqrt(abar[0]))
        c1 = float(np.sqrt(1.0 - abar[0]))
    else:
        # Per-sample timesteps broadcast over the batch axis.
        tail = (1,) * (z0t.data.ndim - 1)
        c0 = np.sqrt(abar).reshape((-1,) + tail)
        c1 = np.sqrt(1.0 - abar).reshape((-1,) + tail)
    out = ad.add(ad.mul(z0t, c0), ad.mul(epst, c1))
    if isinstance(z0, Tensor) or isinstance(eps, Tensor):
        return out
    return out.data


def ddpm_loss(model: Denoiser, z0, t, eps, schedule: NoiseSchedule) -> Tensor:
    """Mean squared error between eps and the model's prediction at z_t."""
    zt = q_sample(ad.as_tensor(z0), t, ad.as_tensor(eps), schedule)
    pred = model(zt, t)
    return ad.mse(ad.as_tensor(eps), pred)


def reverse_step(z_t, t: int, eps_hat, schedule: NoiseSchedule, noise):
    """One ancestral step: z_{t-1} from z_t and the predicted noise.

    noise must be zero at t = 1 (the caller passes zeros).
    """
    if t < 1 or t > schedule.T:
        raise RejectedInput(f"reverse_step: t={t} outside [1, {schedule.T}]")
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    a = schedule.alpha(t)
    abar = schedule.alpha_bar(t)
    mean = (z_t - ((1.0 - a) / np.sqrt(1.0 - abar)) * eps_hat) / np.sqrt(a)
    return mean + schedule.sigma(t) * noise


def sample(model: Denoiser, schedule: NoiseSchedule, rng: RngStream,
           shape=(1, 1, 16, 16)) -> np.ndarray:
    """Ancestral sampling from t = T down to 1; deterministic given the stream."""
    z = rng.gaussian(shape)
    with ad.no_grad():
        for t in range(schedule.T, 0, -1):
            eps_hat = model(Tensor(z), t).data
            noise = rng.gaussian(shape) if t > 1 else np.zeros(shape)
            z = reverse_step(z, t, eps_hat, schedule, noise)
    return z


@dataclass
class SyntheticDataset:
    """Procedural 16x16-ish grayscale shapes (rectangles and discs) in [-1, 1].

    Regeneration from (n, size, seed) is exact.
    """

    n: int
    size: int = 16
    seed: int = 0
    images: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = RngStream(self.seed).split("synthetic-shapes")
        s = self.size
        yy, xx = np.mgrid[0:s, 0:s]
        imgs = np.empty((self.n, s, s))
        for i in range(self.n):
            back = -1.0 + 0.6 * rng.uniform(())
            img = np.full((s, s), back)
            for _ in range(int(rng.integers(1, 3))):
                fore = 0.2 + 0.8 * rng.uniform(())
                if rng.uniform(()) < 0.5:
                    h = int(rng.integers(3, max(4, s // 2)))
                    w = int(rng.integers(3, max(4, s // 2)))
                    top = int(rng.integers(0, s - h))
                    left = int(rng.integers(0, s - w))
                    img[top:top + h, left:left + w] = fore
                else:
                    r = int(rng.integers(2, max(3, s // 3)))
                    cy = int(rng.integers(r, s - r))
                    cx = int(rng.integers(r, s - r))
                    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
                    img[mask] = fore
            imgs[i] = np.clip(img, -1.0, 1.0)
        self.images = imgs

    def __len__(self):
        return self.n

    def batch(self, indices) -> np.ndarray:
        """(B, 1, H, W) batch for the given indices."""
        return self.images[np.asarray(indices, dtype=np.int64)][:, None]


def train_denoiser(model: Denoiser, images: np.ndarray, schedule: NoiseSchedule,
                   steps: int, rng: RngStream, batch_size: int = 8,
                   lr: float = 1e-3):
    """Train the noise predictor; returns the per-step loss trace."""
    if images.ndim == 3:
        images = images[:, None]
    n = images.shape[0]
    opt = Adam(model.param_list(), lr=lr)
    trace = np.empty(steps)
    for step in range(steps):
        idx = rng.integers(0, n, (batch_size,))
        z0 = images[idx]
        t = rng.integers(1, schedule.T + 1, (batch_size,))
        eps = rng.gaussian(z0.shape)
        loss = ddpm_loss(model, z0, t, eps, schedule)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        trace[step] = loss.item()
    return trace


def eval_ddpm_loss(model: Denoiser, images: np.ndarray, schedule: NoiseSchedule,
                   rng: RngStream, n_draws: int = 64, batch_size: int = 8) -> float:
    """Average noise-prediction loss over fixed (z0, t, eps) draws."""
    if images.ndim == 3:
        images = images[:, None]
    n = images.shape[0]
    total = 0.0
    with ad.no_grad():
        for _ in range(n_draws):
            idx = rng.integers(0, n, (batch_size,))
            z0 = images[idx]
            t = rng.integers(1, schedule.T + 1, (batch_size,))
            eps = rng.gaussian(z0.shape)
            total += ddpm_loss(model, z0, t, eps, schedule).item()
    return total / n_draws
