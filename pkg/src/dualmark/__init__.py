"""Dual watermarking for a toy pixel-space diffusion model.

Two embedding branches:
- a key-triggered model watermark living in the diffusion model's learned
  noise distribution, extracted by blending a trigger key into the reverse
  process;
- dynamic per-image watermarks carried by a fine-tuned conditional decoder
  and read back by a trained bit extractor.

Plus the supporting cast: a QR-like payload codec, an evaluation-time attack
suite, 11 image statistics, presence/classification tests, and toy
generation-quality scores. Trainable components and image transforms are
also exposed as scikit-learn style estimators (see ``dualmark.estimators``).
"""

__version__ = "0.1.0"

from . import autodiff
from .autodiff import RngStream, Tensor

__all__ = ["autodiff", "RngStream", "Tensor", "__version__"]
