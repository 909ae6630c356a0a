"""Dynamic per-image watermarking.

Two trained pieces: a residual embedder + bit extractor pair optimized
jointly under a differentiable distortion layer (only the extractor is kept
downstream), and a conditional decoder fine-tuned so that everything it
decodes carries one of up to N registered bit messages, selected by a
condition embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, RngStream, Tensor
from .errors import RejectedConfig, RejectedInput, ShapeError
from .nets import ConditionalDecoder, EncoderNet, ExtractorNet, ToyAutoencoder
from .payload import huffman_encode

MAX_CONDITIONS = 16
DEFAULT_K = 48
DEFAULT_ALPHA = 0.1
LAMBDA_IMG = 0.7
LAMBDA_REC = 1.0


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------


@dataclass
class WatermarkMessage:
    """k-bit message derived from text; the text itself is only provenance."""

    bits: np.ndarray
    source_text: str = ""
    condition: int = 0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8).reshape(-1)
        if not np.all((self.bits == 0) | (self.bits == 1)):
            raise RejectedInput("message bits must be 0/1")

    @property
    def k(self):
        return self.bits.size

    def hex(self) -> str:
        padded = np.concatenate([self.bits, np.zeros((-len(self.bits)) % 4, np.uint8)])
        return "".join(f"{int(''.join(map(str, padded[i:i + 4])), 2):x}"
                       for i in range(0, len(padded), 4))


def message_from_text(text: str, k: int = DEFAULT_K, condition: int = 0) -> WatermarkMessage:
    """Huffman bits of the text behind an 8-bit length prefix, zero-padded or
    truncated to exactly k bits."""
    if not text:
        raise RejectedInput("empty message text")
    _, payload = huffman_encode(text.encode("utf-8"))
    prefix = [(min(len(payload), 255) >> (7 - i)) & 1 for i in range(8)]
    bits = np.concatenate([np.array(prefix, dtype=np.uint8), payload])
    if len(bits) >= k:
        bits = bits[:k]
    else:
        bits = np.concatenate([bits, np.zeros(k - len(bits), dtype=np.uint8)])
    return WatermarkMessage(bits=bits, source_text=text, condition=condition)


def write_message_manifest(path, messages) -> None:
    """One line per condition: 'i <tab> k-bit hex <tab> source text'."""
    with open(path, "w", encoding="utf-8") as fh:
        for msg in messages:
            fh.write(f"{msg.condition}\t{msg.hex()}\t{msg.source_text}\n")


def read_message_manifest(path, k: int = DEFAULT_K):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            idx, hexbits, text = line.split("\t", 2)
            bits = []
            for ch in hexbits:
                v = int(ch, 16)
                bits.extend([(v >> 3) & 1, (v >> 2) & 1, (v >> 1) & 1, v & 1])
            out.append(WatermarkMessage(bits=np.array(bits[:k], dtype=np.uint8),
                                        source_text=text, condition=int(idx)))
    return out


# ---------------------------------------------------------------------------
# Embedding / extraction primitives
# ---------------------------------------------------------------------------


def embed_residual(x_o, message: WatermarkMessage, encoder: EncoderNet,
                   alpha: float = DEFAULT_ALPHA):
    """clamp(x + alpha * residual, -1, 1); the residual is tanh-bounded."""
    if alpha < 0:
        raise RejectedInput("alpha must be >= 0")
    if message.k != encoder.k:
        raise RejectedInput(f"message length {message.k} != encoder k {encoder.k}")
    x = ad.as_tensor(x_o)
    squeeze = x.data.ndim == 3
    if squeeze:
        x = ad.reshape(x, (1,) + x.data.shape)
    res = encoder(x, message.bits)
    out = ad.clamp(ad.add(x, ad.mul(res, float(alpha))), -1.0, 1.0)
    if squeeze:
        out = ad.reshape(out, out.data.shape[1:])
    return out if isinstance(x_o, Tensor) else out.data


def extract_bits(extractor: ExtractorNet, x):
    """Logits for each message bit; bits are (logit > 0)."""
    x = ad.as_tensor(x)
    if x.data.ndim == 2:
        x = ad.reshape(x, (1, 1) + x.data.shape)
    elif x.data.ndim == 3:
        x = ad.reshape(x, (1,) + x.data.shape)
    if x.data.ndim != 4 or x.data.shape[1] != extractor.channels:
        raise ShapeError(f"extract_bits: bad input shape {x.data.shape}")
    with ad.no_grad():
        logits = extractor(x).data
    return logits[0] if logits.shape[0] == 1 else logits


def bits_from_logits(logits: np.ndarray) -> np.ndarray:
    return (np.asarray(logits) > 0).astype(np.uint8)


def message_bce_loss(logits, m) -> Tensor:
    """Per-bit binary cross-entropy with logits, summed over the k bits.

    For batched logits (B, k) the per-image sums are averaged over the batch.
    """
    logits = ad.as_tensor(logits)
    bits = np.asarray(m, dtype=np.float64)
    if logits.data.ndim == 1:
        if bits.shape != logits.data.shape:
            raise ShapeError(f"message length {bits.shape} != logits {logits.data.shape}")
        return ad.tsum(ad.bce_with_logits(logits, bits))
    if bits.ndim == 1:
        bits = np.broadcast_to(bits, logits.data.shape).copy()
    if bits.shape != logits.data.shape:
        raise ShapeError(f"message shape {bits.shape} != logits {logits.data.shape}")
    per_elem = ad.bce_with_logits(logits, bits)
    return ad.mul(ad.tsum(per_elem), 1.0 / logits.data.shape[0])


# ---------------------------------------------------------------------------
# Differentiable distortion layer for extractor training
# ---------------------------------------------------------------------------


def _gaussian_kernel1d(sigma: float, size: int) -> np.ndarray:
    xs = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _blur_weight(channels: int, sigma: float = 1.0, size: int = 5) -> np.ndarray:
    k1 = _gaussian_kernel1d(sigma, size)
    k2 = np.outer(k1, k1)
    w = np.zeros((channels, channels, size, size))
    for c in range(channels):
        w[c, c] = k2
    return w

# Pool of differentiable distortions drawn per training batch. JPEG-style
# compression is not differentiable and is exercised only at evaluation time.
ATTACK_POOL = ("identity", "hflip", "blur", "crop_resize", "noise")
POOL_BLUR_SIGMA = 1.0
POOL_BLUR_SIZE = 5
POOL_CROP_RANGE = (0.7, 1.0)
POOL_NOISE_STD = 0.06


def apply_train_transform(x: Tensor, kind: str, rng: RngStream) -> Tensor:
    """One differentiable distortion; gradients flow to the image."""
    if kind == "identity":
        return x
    if kind == "hflip":
        return ad.flip2d(x, axis=3)
    if kind == "blur":
        w = _blur_weight(x.data.shape[1], POOL_BLUR_SIGMA, POOL_BLUR_SIZE)
        return ad.conv2d(x, Tensor(w), padding=POOL_BLUR_SIZE // 2)
    if kind == "crop_resize":
        B, C, H, W = x.data.shape
        lo, hi = POOL_CROP_RANGE
        keep = lo + (hi - lo) * rng.uniform(())
        h = max(2, int(round(H * keep)))
        w = max(2, int(round(W * keep)))
        top = (H - h) // 2
        left = (W - w) // 2
        return ad.bilinear_resize(ad.crop2d(x, top, left, h, w), H, W)
    if kind == "noise":
        return ad.add(x, Tensor(POOL_NOISE_STD * rng.gaussian(x.data.shape)))
    raise RejectedConfig(f"unknown transform '{kind}'")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_extractor(images: np.ndarray, k: int = DEFAULT_K,
                    attack_pool=ATTACK_POOL, steps: int = 3000,
                    rng: RngStream | None = None, seed: int = 0,
                    alpha: float = DEFAULT_ALPHA, lambda_img: float = LAMBDA_IMG,
                    batch_size: int = 8, lr: float = 1e-3, messages=None):
    """Jointly train the residual encoder and the bit extractor.

    Per step: batch of images, fresh random messages (or, when ``messages``
    is given, the fixed message assigned to each image), watermark, one
    pooled distortion, then message BCE + lambda_img * image MSE. Returns
    (encoder, extractor, loss trace); only the extractor is kept downstream.
    """
    if images.ndim == 3:
        images = images[:, None]
    if images.shape[0] == 0:
        raise RejectedInput("empty dataset")
    if len(attack_pool) == 0:
        raise RejectedConfig("empty attack pool")
    if messages is not None:
        messages = np.asarray(messages, dtype=np.float64)
        if messages.ndim == 1:
            messages = messages[None]
        if messages.shape != (images.shape[0], k):
            raise RejectedInput(
                f"messages shape {messages.shape} != ({images.shape[0]}, {k})")
    rng = rng or RngStream(seed)
    encoder = EncoderNet(seed=int(rng.split("enc-init").integers(0, 2 ** 62)), k=k,
                         channels=images.shape[1])
    extractor = ExtractorNet(seed=int(rng.split("ext-init").integers(0, 2 ** 62)), k=k,
                             channels=images.shape[1])
    opt = Adam(encoder.param_list() + extractor.param_list(), lr=lr)
    n = images.shape[0]
    trace = np.empty(steps)
    for step in range(steps):
        idx = rng.integers(0, n, (batch_size,))
        x = Tensor(images[idx])
        if messages is None:
            bits = (rng.uniform((batch_size, k)) < 0.5).astype(np.float64)
        else:
            bits = messages[idx]
        res = encoder(x, bits)
        x_w = ad.clamp(ad.add(x, ad.mul(res, alpha)), -1.0, 1.0)
        kind = attack_pool[int(rng.integers(0, len(attack_pool)))]
        attacked = apply_train_transform(x_w, kind, rng)
        logits = extractor(attacked)
        loss = ad.add(message_bce_loss(logits, bits),
                      ad.mul(ad.mse(x_w, x), lambda_img))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        trace[step] = loss.item()
    return encoder, extractor, trace


def bit_accuracy(extractor: ExtractorNet, images: np.ndarray,
                 bits: np.ndarray) -> float:
    """Mean per-bit agreement between extracted and reference bits."""
    if images.ndim == 3:
        images = images[:, None]
    bits = np.asarray(bits)
    if bits.ndim == 1:
        bits = np.broadcast_to(bits, (images.shape[0], bits.size))
    with ad.no_grad():
        logits = extractor(Tensor(images)).data
    return float(((logits > 0) == (bits > 0.5)).mean())


def finetune_conditional_decoder(autoencoder: ToyAutoencoder, messages,
                                 extractor: ExtractorNet, images: np.ndarray,
                                 steps: int = 1500, rng: RngStream | None = None,
                                 seed: int = 0, lambda_rec: float = LAMBDA_REC,
                                 batch_size: int = 8, lr: float = 1e-3,
                                 max_conditions: int = MAX_CONDITIONS):
    """Fine-tune a condition-aware copy of the decoder; extractor stays frozen.

    Loss per step: message BCE of the extractor on decoded images (condition
    drawn uniformly) + lambda_rec * reconstruction MSE. Returns
    (ConditionalDecoder, loss trace).
    """
    messages = list(messages)
    n_cond = len(messages)
    if n_cond < 1:
        raise RejectedConfig("at least one message required")
    if n_cond > max_conditions:
        raise RejectedConfig(f"{n_cond} conditions exceed the maximum {max_conditions}")
    if images.ndim == 3:
        images = images[:, None]
    rng = rng or RngStream(seed)
    decoder = ConditionalDecoder(seed=int(rng.split("cond-init").integers(0, 2 ** 62)),
                                 base=autoencoder, n_conditions=n_cond)
    # Freeze the extractor for the duration (restored on exit); gradients still
    # flow THROUGH it to the decoder, they just never update it.
    ext_params = list(extractor.params().values())
    for t in ext_params:
        t.requires_grad = False
    try:
        opt = Adam(decoder.param_list(), lr=lr)
        n = images.shape[0]
        trace = np.empty(steps)
        bit_arrays = [m.bits.astype(np.float64) for m in messages]
        for step in range(steps):
            idx = rng.integers(0, n, (batch_size,))
            x = Tensor(images[idx])
            i = int(rng.integers(0, n_cond))
            with ad.no_grad():
                z = autoencoder.encode(x)
            decoded = decoder(Tensor(z.data), i)
            logits = extractor(decoded)
            loss = ad.add(message_bce_loss(logits, bit_arrays[i]),
                          ad.mul(ad.mse(decoded, x), lambda_rec))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            trace[step] = loss.item()
    finally:
        for t in ext_params:
            t.requires_grad = True
    return decoder, trace


def generate_watermarked(decoder: ConditionalDecoder, z, i: int) -> np.ndarray:
    """Decode latent z under condition i, clamped to [-1, 1]."""
    if not 0 <= int(i) < decoder.n_conditions:
        raise RejectedInput(f"unknown condition index {i}")
    z = ad.as_tensor(z)
    squeeze = z.data.ndim == 3
    if squeeze:
        z = ad.reshape(z, (1,) + z.data.shape)
    with ad.no_grad():
        out = ad.clamp(decoder(z, int(i)), -1.0, 1.0).data
    return out[0] if squeeze else out


def train_autoencoder(images: np.ndarray, steps: int = 1500, seed: int = 0,
                      rng: RngStream | None = None, batch_size: int = 8,
                      lr: float = 1e-3):
    """Train the reconstruction autoencoder; returns (model, loss trace)."""
    if images.ndim == 3:
        images = images[:, None]
    rng = rng or RngStream(seed)
    model = ToyAutoencoder(seed=int(rng.split("ae-init").integers(0, 2 ** 62)),
                           channels=images.shape[1])
    opt = Adam(model.param_list(), lr=lr)
    n = images.shape[0]
    trace = np.empty(steps)
    for step in range(steps):
        idx = rng.integers(0, n, (batch_size,))
        x = Tensor(images[idx])
        loss = ad.mse(model(x), x)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        trace[step] = loss.item()
    return model, trace


def reconstruction_error(model, images: np.ndarray) -> float:
    if images.ndim == 3:
        images = images[:, None]
    with ad.no_grad():
        return float(np.mean((model(Tensor(images)).data - images) ** 2))
