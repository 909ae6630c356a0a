"""scikit-learn style wrappers around the trainable components and transforms.

These follow the usual estimator contract (fit/transform/predict, get_params
via BaseEstimator, fresh state on fit) so the pieces compose with pipelines:

    Pipeline([("attack", AttackTransformer("blur:1.0:5")),
              ("stats", ImageStatsTransformer())])

Image batches are (n, H, W) or (n, C, H, W) arrays in [-1, 1] except
ImageStatsTransformer and AttackTransformer, which follow the statistics
convention of [0, 1] images.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import diffusion as df
from . import image_watermark as iw
from .attacks import AttackSpec, apply_attack, parse_attack
from .autodiff import RngStream
from .errors import RejectedInput
from .image_stats import FIELD_NAMES, compute_stats_vector
from .nets import Denoiser
from .validation import check_bits, check_fitted, check_image_batch


class PixelDiffusionModel(BaseEstimator):
    """Toy pixel-space diffusion model with a fit/sample interface."""

    def __init__(self, T=100, beta_start=1e-4, beta_end=0.06, hidden=24,
                 steps=2000, batch_size=8, lr=1e-3, random_state=0):
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.hidden = hidden
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_image_batch(X, channels=1)
        self.schedule_ = df.make_schedule(self.T, self.beta_start, self.beta_end)
        rng = RngStream(self.random_state)
        self.model_ = Denoiser(seed=int(rng.split("init").integers(0, 2 ** 62)),
                               hidden=self.hidden, emb_dim=self.hidden)
        self.shape_ = X.shape[1:]
        self.loss_trace_ = df.train_denoiser(
            self.model_, X, self.schedule_, steps=self.steps,
            rng=rng.split("train"), batch_size=self.batch_size, lr=self.lr)
        return self

    def sample(self, n_samples=1, random_state=None):
        check_fitted(self, "model_")
        seed = self.random_state if random_state is None else random_state
        rng = RngStream(seed).split("sample")
        out = np.empty((n_samples,) + self.shape_)
        for i in range(n_samples):
            out[i] = df.sample(self.model_, self.schedule_, rng.split(f"img{i}"),
                               shape=(1,) + self.shape_)[0]
        return out

    def score(self, X, y=None):
        """Negative held-out noise-prediction loss (higher is better)."""
        check_fitted(self, "model_")
        X = check_image_batch(X, channels=1)
        return -df.eval_ddpm_loss(self.model_, X, self.schedule_,
                                  RngStream(self.random_state).split("score"))


class HiddenWatermarker(BaseEstimator):
    """Residual watermark embedder + extractor pair.

    fit(X) trains both nets on X with random messages under the distortion
    pool; transform(X, bits) embeds; predict(X) extracts bit matrices;
    score(X, bits) is the mean bit accuracy.
    """

    def __init__(self, k=48, alpha=0.1, lambda_img=0.7, steps=3000,
                 batch_size=8, lr=1e-3, attack_pool=iw.ATTACK_POOL,
                 random_state=0):
        self.k = k
        self.alpha = alpha
        self.lambda_img = lambda_img
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.attack_pool = attack_pool
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_image_batch(X, channels=1)
        enc, ext, trace = iw.train_extractor(
            X, k=self.k, attack_pool=self.attack_pool, steps=self.steps,
            rng=RngStream(self.random_state), alpha=self.alpha,
            lambda_img=self.lambda_img, batch_size=self.batch_size, lr=self.lr)
        self.encoder_ = enc
        self.extractor_ = ext
        self.loss_trace_ = trace
        return self

    def transform(self, X, bits=None):
        """Embed bits into X; random per-image messages when bits is None."""
        check_fitted(self, "encoder_")
        X = check_image_batch(X, channels=1)
        if bits is None:
            rng = RngStream(self.random_state).split("messages")
            bits = (rng.uniform((X.shape[0], self.k)) < 0.5).astype(np.uint8)
        bits = check_bits(bits, self.k)
        if bits.ndim == 1:
            bits = np.broadcast_to(bits, (X.shape[0], self.k))
        out = np.empty_like(X)
        for i in range(X.shape[0]):
            msg = iw.WatermarkMessage(bits=bits[i])
            out[i] = iw.embed_residual(X[i], msg, self.encoder_, self.alpha)
        return out

    def predict(self, X):
        """Extracted bits, shape (n, k)."""
        check_fitted(self, "extractor_")
        X = check_image_batch(X, channels=1)
        logits = iw.extract_bits(self.extractor_, X)
        return (np.atleast_2d(logits) > 0).astype(np.uint8)

    def score(self, X, bits):
        check_fitted(self, "extractor_")
        X = check_image_batch(X, channels=1)
        bits = check_bits(bits)
        return iw.bit_accuracy(self.extractor_, X, bits)


class AttackTransformer(BaseEstimator, TransformerMixin):
    """Stateless image attack as a transformer over [0, 1] image stacks."""

    def __init__(self, spec="identity"):
        self.spec = spec

    def _spec(self) -> AttackSpec:
        return parse_attack(self.spec) if isinstance(self.spec, str) else self.spec.validate()

    def fit(self, X, y=None):
        self._spec()
        return self

    def transform(self, X):
        spec = self._spec()
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim == 2:
            return apply_attack(arr, spec)
        if arr.ndim not in (3, 4):
            raise RejectedInput(f"expected image stack, got shape {arr.shape}")
        return np.stack([apply_attack(img, spec) for img in arr])


class ImageStatsTransformer(BaseEstimator, TransformerMixin):
    """Maps [0, 1] images to their 11-field statistics vectors."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        return np.stack([compute_stats_vector(img).to_array() for img in arr])

    def get_feature_names_out(self, input_features=None):
        return np.asarray(FIELD_NAMES, dtype=object)
