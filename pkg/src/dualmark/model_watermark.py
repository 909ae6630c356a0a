"""Key-triggered model watermark embedded in the diffusion process.

Latent states are blended with a fixed trigger key; fine-tuning on the joint
task + watermark objective carves a keyed region of the learned noise
distribution that reconstructs the watermark image when the same key is
blended back in during reverse diffusion. Without the key (or with a wrong
one) sampling behaves as usual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, RngStream, Tensor
from .diffusion import NoiseSchedule, q_sample, reverse_step
from .errors import RejectedInput, RejectedKey, ShapeError
from .payload import BitMatrix


@dataclass
class TriggerKey:
    """Blending key kappa with factor gamma_kappa and its provenance seed."""

    kappa: np.ndarray
    gamma_kappa: float
    seed: int
    divergence_score: float = 0.0

    def __post_init__(self):
        self.kappa = np.asarray(self.kappa, dtype=np.float64)
        if not np.all(np.isfinite(self.kappa)):
            raise RejectedInput("kappa must be finite")
        if not 0.0 < self.gamma_kappa < 1.0:
            raise RejectedInput(f"gamma_kappa must lie in (0, 1), got {self.gamma_kappa}")


@dataclass
class WDPConfig:
    """Weights, budgets, and thresholds for watermark embedding/verification."""

    gamma_eps: float = 1.0
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    divergence_threshold: float | None = None  # None -> derived from the key
    accept_threshold: float = 0.9

    def __post_init__(self):
        if self.gamma_eps < 0:
            raise RejectedInput("gamma_eps must be >= 0")
        if not 0.0 < self.accept_threshold <= 1.0:
            raise RejectedInput("accept_threshold must lie in (0, 1]")


@dataclass
class WatermarkVerdict:
    bit_accuracy: float
    matched_bits: int
    total_bits: int
    accepted: bool
    extracted_image: np.ndarray = field(repr=False, default=None)


KEY_MEAN = 2.0  # kappa ~ N(KEY_MEAN * 1, I); see default_divergence_threshold


def default_divergence_threshold(shape, gamma_kappa: float, c: float = KEY_MEAN) -> float:
    """Half the analytic mean-shift term of the divergence score."""
    dim = int(np.prod(shape))
    return 0.5 * dim * ((1.0 - gamma_kappa) * c) ** 2


def make_trigger_key(shape, seed: int, gamma_kappa: float = 0.7,
                     c: float = KEY_MEAN) -> TriggerKey:
    """Seeded draw kappa ~ N(c * 1, I); divergence filled by key_divergence."""
    rng = RngStream(seed).split("trigger-key")
    kappa = c + rng.gaussian(tuple(shape))
    key = TriggerKey(kappa=kappa, gamma_kappa=gamma_kappa, seed=seed)
    key_divergence(key, RngStream(seed).split("key-divergence"))
    return key


def blend_state(z_t, key: TriggerKey):
    """gamma * z_t + (1 - gamma) * kappa. Accepts arrays or Tensors."""
    zt = ad.as_tensor(z_t)
    kshape = key.kappa.shape
    zshape = zt.data.shape
    if zshape != kshape and zshape[-len(kshape):] != kshape:
        raise ShapeError(f"blend_state: kappa shape {kshape} incompatible with "
                         f"state shape {zshape}")
    g = key.gamma_kappa
    out = ad.add(ad.mul(zt, g), Tensor(key.kappa * (1.0 - g)))
    return out if isinstance(z_t, Tensor) else out.data


def unblend_state(blended, key: TriggerKey):
    """Inverse of blend_state for gamma > 0 (exact up to rounding)."""
    blended = np.asarray(blended, dtype=np.float64)
    return (blended - (1.0 - key.gamma_kappa) * key.kappa) / key.gamma_kappa


def wdp_train_state(z0_w, t, eps_w, schedule: NoiseSchedule, key: TriggerKey):
    """Blend of the forward marginal of the watermark image at timestep t."""
    return blend_state(q_sample(z0_w, t, eps_w, schedule), key)


def wdp_loss(model, z0, z0_w, t, eps, eps_w, schedule: NoiseSchedule,
             key: TriggerKey, config: WDPConfig) -> Tensor:
    """Joint objective: gamma_eps * task noise MSE + watermark noise MSE.

    t is a single timestep shared by both terms; eps and eps_w are
    independent draws.
    """
    eps_t = ad.as_tensor(eps)
    eps_w_t = ad.as_tensor(eps_w)
    z_t = q_sample(ad.as_tensor(z0), t, eps_t, schedule)
    z_tw = blend_state(q_sample(ad.as_tensor(z0_w), t, eps_w_t, schedule), key)
    wm_term = ad.mse(eps_w_t, model(z_tw, t))
    if config.gamma_eps == 0.0:
        return wm_term
    task_term = ad.mse(eps_t, model(z_t, t))
    return ad.add(ad.mul(task_term, config.gamma_eps), wm_term)


def key_divergence(key: TriggerKey, rng: RngStream, n_samples: int = 1024) -> float:
    """Squared 2-Wasserstein distance between diagonal-Gaussian fits of the
    blended and unblended standard-normal state distributions.

    Stores the score on the key and returns it.
    """
    if n_samples < 100:
        raise RejectedInput(f"key_divergence needs >= 100 samples, got {n_samples}")
    dim = key.kappa.size
    z = rng.gaussian((n_samples, dim))
    blended = key.gamma_kappa * z + (1.0 - key.gamma_kappa) * key.kappa.reshape(-1)
    mu = blended.mean(axis=0)
    sd = blended.std(axis=0)
    score = float(np.sum(mu ** 2 + (sd - 1.0) ** 2))
    key.divergence_score = score
    return score


def _require_accepted(key: TriggerKey, config: WDPConfig) -> None:
    threshold = config.divergence_threshold
    if threshold is None:
        threshold = default_divergence_threshold(key.kappa.shape, key.gamma_kappa)
    if key.divergence_score < threshold:
        raise RejectedKey(
            f"key divergence {key.divergence_score:.3f} below threshold {threshold:.3f}")


def embed_model_watermark(model, task_images: np.ndarray, wm_image: np.ndarray,
                          key: TriggerKey, config: WDPConfig, rng: RngStream,
                          schedule: NoiseSchedule):
    """Fine-tune the host model on the joint objective; returns the loss trace.

    Per iteration: a task batch from the training set, the watermark image as
    the watermark sample, independent noises, one shared uniform timestep,
    one optimizer step.
    """
    _require_accepted(key, config)
    if task_images.ndim == 3:
        task_images = task_images[:, None]
    wm = np.asarray(wm_image, dtype=np.float64)
    if wm.ndim == 2:
        wm = wm[None]
    if wm.ndim == 3:
        wm = wm[None]
    n = task_images.shape[0]
    opt = Adam(model.param_list(), lr=config.lr)
    trace = np.empty(config.steps)
    for step in range(config.steps):
        idx = rng.integers(0, n, (config.batch_size,))
        z0 = task_images[idx]
        z0_w = np.repeat(wm, config.batch_size, axis=0)
        # One timestep per sample, shared between the task and watermark terms.
        t = rng.integers(1, schedule.T + 1, (config.batch_size,))
        eps = rng.gaussian(z0.shape)
        eps_w = rng.gaussian(z0_w.shape)
        loss = wdp_loss(model, z0, z0_w, t, eps, eps_w, schedule, key, config)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        trace[step] = loss.item()
    return trace


def extract_model_watermark(model, key: TriggerKey, schedule: NoiseSchedule,
                            rng: RngStream, shape=(1, 1, 16, 16)) -> np.ndarray:
    """Reverse diffusion with the key blended into every model input.

    Starts from z ~ N(0, I); at each step the model sees
    gamma * z_t + (1 - gamma) * kappa, and the ancestral update is applied to
    the unblended state. Returns the reconstructed watermark image (H, W).
    """
    z = rng.gaussian(shape)
    with ad.no_grad():
        for t in range(schedule.T, 0, -1):
            eps_hat = model(Tensor(blend_state(z, key)), t).data
            noise = rng.gaussian(shape) if t > 1 else np.zeros(shape)
            z = reverse_step(z, t, eps_hat, schedule, noise)
    return z[0, 0]


def verify_model_watermark(extracted: np.ndarray, reference: BitMatrix,
                           threshold: float = 0.9) -> WatermarkVerdict:
    """Binarize the extraction at the midpoint of its own range, majority-vote
    each replicated cell, and compare against the reference cell grid.
    """
    from .payload import cells_from_image

    cells = cells_from_image(extracted, reference.B, reference.replication)
    matches = int((cells == reference.cells).sum())
    total = int(reference.cells.size)
    acc = matches / total
    return WatermarkVerdict(bit_accuracy=acc, matched_bits=matches,
                            total_bits=total, accepted=acc >= threshold,
                            extracted_image=np.asarray(extracted, dtype=np.float64))
