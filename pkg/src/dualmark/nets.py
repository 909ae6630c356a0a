"""Layers and the small convolutional networks used by the trained components.

Every network exposes ``params()`` as an ordered name->Tensor mapping, which
is what the weight persistence format serializes. Parameter initialization
draws from labeled RngStream splits, so construction is fully deterministic
given a seed.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .errors import RejectedInput, ShapeError


def he_normal(rng: RngStream, shape, fan_in: int) -> np.ndarray:
    return rng.gaussian(shape) * np.sqrt(2.0 / fan_in)


_COORD_CACHE = {}

POSITION_FREQS = (1.0, 2.0, 4.0)
N_POSITION_CHANNELS = 2 + 3 * len(POSITION_FREQS)


def coord_planes(B: int, H: int, W: int) -> Tensor:
    """Fixed positional-encoding channels: linear coords plus sin carriers.

    Several networks here have to represent per-pixel patterns (trigger keys,
    watermark layouts, per-bit code atoms); a purely translation-equivariant
    stack cannot. Linear y/x channels give position, and the sinusoidal
    channels provide ready-made spatial carriers that the first conv layer
    can gate, which is what makes per-bit codes trainable at this scale.
    """
    key = (B, H, W)
    if key not in _COORD_CACHE:
        ys = np.linspace(-1.0, 1.0, H)[:, None] * np.ones((1, W))
        xs = np.ones((H, 1)) * np.linspace(-1.0, 1.0, W)[None, :]
        planes = [ys, xs]
        for f in POSITION_FREQS:
            planes.append(np.sin(np.pi * f * ys))
            planes.append(np.sin(np.pi * f * xs))
            planes.append(np.sin(np.pi * f * ys) * np.sin(np.pi * f * xs))
        _COORD_CACHE[key] = np.stack(planes)[None].repeat(B, axis=0)
    return Tensor(_COORD_CACHE[key])


class Module:
    """Minimal parameter container with flat, prefix-named persistence."""

    def params(self) -> dict:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                for sub, t in value.params().items():
                    out[f"{name}.{sub}"] = t
        return out

    def param_list(self):
        return list(self.params().values())

    def state_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self.params().items()}

    def load_state(self, state: dict) -> None:
        params = self.params()
        missing = set(params) - set(state)
        if missing:
            raise RejectedInput(f"missing parameters in state: {sorted(missing)}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()

    def num_params(self) -> int:
        return sum(t.data.size for t in self.params().values())


class Conv2d(Module):
    def __init__(self, rng: RngStream, cin: int, cout: int, k: int = 3,
                 stride: int = 1, padding: int = 1, scale: float = 1.0):
        fan_in = cin * k * k
        self.w = Tensor(he_normal(rng.split("w"), (cout, cin, k, k), fan_in) * scale,
                        requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, rng: RngStream, cin: int, cout: int, k: int = 4,
                 stride: int = 2, padding: int = 1, scale: float = 1.0):
        fan_in = cin * k * k
        self.w = Tensor(he_normal(rng.split("w"), (cin, cout, k, k), fan_in) * scale,
                        requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ad.conv2d_transpose(x, self.w, self.b, stride=self.stride,
                                   padding=self.padding)


class Dense(Module):
    def __init__(self, rng: RngStream, nin: int, nout: int, scale: float = 1.0):
        self.w = Tensor(he_normal(rng.split("w"), (nin, nout), nin) * scale,
                        requires_grad=True)
        self.b = Tensor(np.zeros(nout), requires_grad=True)

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Standard sin/cos timestep embedding, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class Denoiser(Module):
    """Noise-prediction network: conv stack with an additive timestep embedding.

    Two fixed coordinate planes (x, y in [-1, 1]) are concatenated to the
    input so the network is position-aware: both the key-triggered watermark
    pathway and the watermark reconstruction are per-pixel patterns that a
    purely translation-equivariant stack could not represent.

    Input (B, C, H, W), timestep t (int or per-sample array); output has the
    input's shape.
    """

    def __init__(self, seed: int, channels: int = 1, hidden: int = 24, emb_dim: int = 24):
        rng = RngStream(seed)
        self.channels = channels
        self.hidden = hidden
        self.emb_dim = emb_dim
        self.conv_in = Conv2d(rng.split("conv_in"), channels + N_POSITION_CHANNELS, hidden)
        self.temb = Dense(rng.split("temb"), emb_dim, hidden)
        self.conv_mid1 = Conv2d(rng.split("conv_mid1"), hidden, hidden)
        self.conv_mid2 = Conv2d(rng.split("conv_mid2"), hidden, hidden)
        self.conv_out = Conv2d(rng.split("conv_out"), hidden, channels, scale=0.1)

    def __call__(self, z, t):
        z = ad.as_tensor(z)
        B, _, H, W = z.data.shape
        tarr = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (B,))
        emb = Tensor(sinusoidal_embedding(tarr, self.emb_dim))
        h = ad.relu(self.conv_in(ad.concat([z, coord_planes(B, H, W)], axis=1)))
        proj = ad.reshape(self.temb(emb), (B, self.hidden, 1, 1))
        h = ad.add(h, proj)
        h = ad.relu(self.conv_mid1(h))
        h = ad.relu(self.conv_mid2(h))
        return self.conv_out(h)


class EncoderNet(Module):
    """Residual watermark encoder: message planes + image -> tanh residual.

    Coordinate channels ride along so each bit can carve a position-specific
    code atom (message planes alone are spatially constant, and convolutions
    of constants stay constant).
    """

    def __init__(self, seed: int, k: int = 48, channels: int = 1, hidden: int = 32):
        rng = RngStream(seed)
        self.k = k
        self.channels = channels
        self.conv1 = Conv2d(rng.split("conv1"), channels + k + N_POSITION_CHANNELS, hidden)
        self.conv2 = Conv2d(rng.split("conv2"), hidden, hidden)
        self.conv3 = Conv2d(rng.split("conv3"), hidden, channels)

    def __call__(self, x, bits):
        x = ad.as_tensor(x)
        B, C, H, W = x.data.shape
        bits = np.asarray(bits, dtype=np.float64)
        if bits.ndim == 1:
            bits = np.broadcast_to(bits, (B, self.k))
        if bits.shape != (B, self.k):
            raise ShapeError(f"message shape {bits.shape} != ({B}, {self.k})")
        plane = Tensor(np.broadcast_to(
            (2.0 * bits - 1.0)[:, :, None, None], (B, self.k, H, W)).copy())
        h = ad.concat([x, plane, coord_planes(B, H, W)], axis=1)
        h = ad.relu(self.conv1(h))
        h = ad.relu(self.conv2(h))
        return ad.tanh(self.conv3(h))


class ExtractorNet(Module):
    """Watermark bit extractor: conv stack, global average pool, linear head.

    Takes the same coordinate channels as the encoder so its pooled features
    can act as position-specific matched filters. The pooled width must
    comfortably exceed k: the head reads k bits out of an hidden-dimensional
    average.
    """

    def __init__(self, seed: int, k: int = 48, channels: int = 1, hidden: int = 96):
        rng = RngStream(seed)
        self.k = k
        self.channels = channels
        self.hidden = hidden
        self.conv1 = Conv2d(rng.split("conv1"), channels + N_POSITION_CHANNELS, hidden)
        self.conv2 = Conv2d(rng.split("conv2"), hidden, hidden, stride=2)
        self.conv3 = Conv2d(rng.split("conv3"), hidden, hidden)
        self.head = Dense(rng.split("head"), hidden, k)

    def features(self, x):
        """Penultimate (pooled) features, shape (B, hidden)."""
        x = ad.as_tensor(x)
        B, _, H, W = x.data.shape
        h = ad.relu(self.conv1(ad.concat([x, coord_planes(B, H, W)], axis=1)))
        h = ad.relu(self.conv2(h))
        h = ad.relu(self.conv3(h))
        return ad.tmean(h, axis=(2, 3))

    def __call__(self, x):
        return self.head(self.features(x))


class AutoencoderEncoder(Module):
    def __init__(self, rng: RngStream, channels: int, hidden: int, c_latent: int):
        self.conv1 = Conv2d(rng.split("conv1"), channels, hidden)
        self.conv2 = Conv2d(rng.split("conv2"), hidden, c_latent, stride=2)

    def __call__(self, x):
        h = ad.relu(self.conv1(x))
        return self.conv2(h)


class AutoencoderDecoder(Module):
    def __init__(self, rng: RngStream, channels: int, hidden: int, cin: int):
        self.up = ConvTranspose2d(rng.split("up"), cin, hidden)
        self.conv1 = Conv2d(rng.split("conv1"), hidden, hidden)
        self.conv2 = Conv2d(rng.split("conv2"), hidden, channels)

    def __call__(self, z):
        h = ad.relu(self.up(z))
        h = ad.relu(self.conv1(h))
        return ad.tanh(self.conv2(h))


class ToyAutoencoder(Module):
    """Small conv autoencoder over [-1, 1] images; latent (c_latent, H/2, W/2)."""

    def __init__(self, seed: int, channels: int = 1, hidden: int = 16, c_latent: int = 8):
        rng = RngStream(seed)
        self.channels = channels
        self.c_latent = c_latent
        self.encoder = AutoencoderEncoder(rng.split("enc"), channels, hidden, c_latent)
        self.decoder = AutoencoderDecoder(rng.split("dec"), channels, hidden, c_latent)

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def __call__(self, x):
        return self.decode(self.encode(x))


class ConditionalDecoder(Module):
    """Decoder extended with a condition embedding concatenated to the latent.

    Initialized from a base decoder so that, before fine-tuning, decoding
    with any condition reproduces the base decoder's output exactly (the
    condition channels start at zero weight).
    """

    def __init__(self, seed: int, base: ToyAutoencoder, n_conditions: int,
                 cond_dim: int = 8):
        if n_conditions < 1:
            raise RejectedInput("at least one condition required")
        rng = RngStream(seed)
        self.n_conditions = n_conditions
        self.cond_dim = cond_dim
        self.c_latent = base.c_latent
        self.net = AutoencoderDecoder(rng.split("dec"), base.channels, base.decoder.conv1.w.data.shape[0],
                                      base.c_latent + cond_dim)
        # Copy base weights into the latent-channel slice; zero the condition slice.
        w = np.zeros_like(self.net.up.w.data)
        w[:base.c_latent] = base.decoder.up.w.data
        self.net.up.w.data = w
        self.net.up.b.data = base.decoder.up.b.data.copy()
        self.net.conv1.w.data = base.decoder.conv1.w.data.copy()
        self.net.conv1.b.data = base.decoder.conv1.b.data.copy()
        self.net.conv2.w.data = base.decoder.conv2.w.data.copy()
        self.net.conv2.b.data = base.decoder.conv2.b.data.copy()
        emb = rng.split("emb").gaussian((n_conditions, cond_dim))
        self.embeddings = Tensor(emb, requires_grad=True)

    def __call__(self, z, i):
        z = ad.as_tensor(z)
        if not 0 <= int(i) < self.n_conditions:
            raise RejectedInput(f"unknown condition index {i} (N={self.n_conditions})")
        B, _, h, w = z.data.shape
        row = ad.reshape(ad.select_row(self.embeddings, int(i)), (1, self.cond_dim, 1, 1))
        plane = ad.mul(row, Tensor(np.ones((B, self.cond_dim, h, w))))
        return self.net(ad.concat([z, plane], axis=1))


class FeatureExtractor(Module):
    """Frozen random conv feature extractor, pooled to a 64-dim vector.

    Deterministic given its seed and never trained; the final layer is linear
    (no relu) so features can take either sign.
    """

    def __init__(self, seed: int, channels: int = 1, dim: int = 64):
        rng = RngStream(seed)
        self.dim = dim
        self.conv1 = Conv2d(rng.split("conv1"), channels, 16)
        self.conv2 = Conv2d(rng.split("conv2"), 16, 32, stride=2)
        self.conv3 = Conv2d(rng.split("conv3"), 32, dim)
        # Random biases keep the relu stack genuinely nonlinear (an all-zero-
        # bias stack is positively homogeneous, making cosine gain-invariant).
        self.conv1.b.data = 0.3 * rng.split("b1").gaussian((16,))
        self.conv2.b.data = 0.3 * rng.split("b2").gaussian((32,))
        for t in self.params().values():
            t.requires_grad = False
        # params() skips non-grad tensors afterwards; never persisted (seeded).
        self._frozen = True

    def __call__(self, x):
        h = ad.relu(self.conv1(x))
        h = ad.relu(self.conv2(h))
        h = self.conv3(h)
        return ad.tmean(h, axis=(2, 3))
