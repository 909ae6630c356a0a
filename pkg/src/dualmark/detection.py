"""Presence testing, watermark classification, attack-grid evaluation, and
toy generation-quality scores.

The presence test is an exact binomial tail under the null that each
extracted bit matches by chance (p = 1/2); classification is minimum Hamming
distance over the registered messages. The quality scores keep the Frechet
and inception-score formulas but run them on in-repo features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .attacks import AttackSpec, apply_attack
from .errors import RejectedInput
from .image_watermark import generate_watermarked


@dataclass
class PresenceVerdict:
    matches: int
    k: int
    p_value: float
    present: bool
    alpha_level: float


@dataclass
class ClassificationVerdict:
    best_index: int
    distances: np.ndarray
    margin: int


@dataclass
class FrechetResult:
    d2: float
    dim: int
    n_a: int
    n_b: int
    regularized: bool = False


def presence_test(extracted_bits, reference_bits, alpha_level: float = 1e-3) -> PresenceVerdict:
    """Exact binomial tail P[matches >= observed] under chance agreement."""
    a = np.asarray(extracted_bits).reshape(-1).astype(np.int64)
    b = np.asarray(reference_bits).reshape(-1).astype(np.int64)
    if a.size != b.size:
        raise RejectedInput(f"bit lengths differ: {a.size} vs {b.size}")
    k = a.size
    matches = int((a == b).sum())
    p = sum(comb(k, j) for j in range(matches, k + 1)) / (2.0 ** k)
    return PresenceVerdict(matches=matches, k=k, p_value=float(p),
                           present=p < alpha_level, alpha_level=alpha_level)


def classify_watermark(extracted_bits, registry) -> ClassificationVerdict:
    """Minimum-Hamming assignment; ties break to the lowest index."""
    registry = list(registry)
    if not registry:
        raise RejectedInput("empty message registry")
    bits = np.asarray(extracted_bits).reshape(-1).astype(np.int64)
    dists = []
    for msg in registry:
        ref = np.asarray(getattr(msg, "bits", msg)).reshape(-1).astype(np.int64)
        if ref.size != bits.size:
            raise RejectedInput(f"registry message length {ref.size} != {bits.size}")
        dists.append(int((ref != bits).sum()))
    dists = np.asarray(dists)
    best = int(np.argmin(dists))  # argmin takes the first minimum
    if len(dists) > 1:
        margin = int(np.partition(dists, 1)[1] - dists[best])
    else:
        margin = 0
    return ClassificationVerdict(best_index=best, distances=dists, margin=margin)


# ---------------------------------------------------------------------------
# Toy quality scores
# ---------------------------------------------------------------------------


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def toy_frechet(features_a, features_b) -> FrechetResult:
    """Frechet distance between Gaussian fits of two feature corpora."""
    A = np.asarray(features_a, dtype=np.float64)
    B = np.asarray(features_b, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise RejectedInput("feature corpora must be 2-d with equal dimension")
    dim = A.shape[1]
    if A.shape[0] < dim + 1 or B.shape[0] < dim + 1:
        raise RejectedInput(f"need at least dim+1={dim + 1} samples per corpus")
    mu_a, mu_b = A.mean(axis=0), B.mean(axis=0)
    ca = np.cov(A, rowvar=False)
    cb = np.cov(B, rowvar=False)
    ca = np.atleast_2d(ca)
    cb = np.atleast_2d(cb)
    regularized = False
    if min(np.linalg.eigvalsh(ca).min(), np.linalg.eigvalsh(cb).min()) < 1e-10:
        ca = ca + 1e-6 * np.eye(dim)
        cb = cb + 1e-6 * np.eye(dim)
        regularized = True
    sa = _sym_sqrt(ca)
    cross = _sym_sqrt(sa @ cb @ sa)
    d2 = float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb)
               - 2.0 * np.trace(cross))
    return FrechetResult(d2=max(d2, 0.0), dim=dim, n_a=A.shape[0], n_b=B.shape[0],
                         regularized=regularized)


def toy_inception_score(class_probs) -> float:
    """exp(mean KL(p(y|x) || mean p(y))) over per-image class probabilities."""
    P = np.asarray(class_probs, dtype=np.float64)
    if P.ndim != 2:
        raise RejectedInput("class_probs must be (n_images, n_classes)")
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
        raise RejectedInput("rows must be probability vectors")
    marginal = P.mean(axis=0)
    kl = np.zeros(P.shape[0])
    for i, row in enumerate(P):
        nz = row > 0
        kl[i] = np.sum(row[nz] * (np.log(row[nz]) - np.log(marginal[nz])))
    return float(np.exp(kl.mean()))


def classification_probs(extracted_bits, registry, temperature: float = 1.0) -> np.ndarray:
    """Softmax over negative Hamming distances; the classifier's class
    probabilities used by the toy inception score."""
    registry = list(registry)
    bits = np.asarray(extracted_bits).reshape(-1).astype(np.int64)
    d = np.array([int((np.asarray(m.bits).astype(np.int64) != bits).sum())
                  for m in registry], dtype=np.float64)
    logits = -d / temperature
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


# ---------------------------------------------------------------------------
# Attack-grid evaluation
# ---------------------------------------------------------------------------


@dataclass
class AttackReport:
    """Table-2-shaped results: one column per attack, two metric rows."""

    attack_labels: list
    presence_rate: np.ndarray
    classification_accuracy: np.ndarray
    false_positive_rate: float
    n_positive: int
    n_negative: int
    per_image: list = field(default_factory=list, repr=False)

    def ordering_violations(self, reference_kind: str = "texture"):
        """Attacks that degrade presence MORE than the reference attack."""
        drops = {}
        base = None
        ref = None
        for label, rate in zip(self.attack_labels, self.presence_rate):
            kind = label.split(":")[0]
            if kind == "identity":
                base = rate
            if kind == reference_kind:
                ref = rate
        if base is None or ref is None:
            return []
        ref_drop = base - ref
        out = []
        for label, rate in zip(self.attack_labels, self.presence_rate):
            kind = label.split(":")[0]
            if kind in ("flip", "crop") and (base - rate) > ref_drop + 1e-12:
                out.append(label)
        return out


def attack_evaluation(decoder, autoencoder, extractor, registry, corpus,
                      grid=None, alpha_level: float = 1e-3,
                      rng: RngStream | None = None) -> AttackReport:
    """Generate watermarked images across conditions, attack, test, classify.

    Clean autoencoder reconstructions are the negatives: the presence test is
    run once per clean image against a round-robin registry message under the
    identity attack, giving the false-positive rate.
    """
    from .attacks import attack_grid

    registry = list(registry)
    if not registry:
        raise RejectedInput("empty registry")
    corpus = np.asarray(corpus, dtype=np.float64)
    if corpus.ndim == 3:
        corpus = corpus[:, None]
    if corpus.shape[0] == 0:
        raise RejectedInput("empty corpus")
    grid = list(grid) if grid is not None else attack_grid()
    n_cond = len(registry)
    per_image = []

    # Watermarked generations per (image, condition).
    with ad.no_grad():
        latents = autoencoder.encode(Tensor(corpus)).data
    generated = []
    for i_img in range(corpus.shape[0]):
        for cond, msg in enumerate(registry):
            img = generate_watermarked(decoder, latents[i_img], cond)
            generated.append((i_img, cond, msg, img))

    labels = [spec.label() for spec in grid]
    presence = np.zeros(len(grid))
    accuracy = np.zeros(len(grid))
    for a_idx, spec in enumerate(grid):
        hits = 0
        correct = 0
        for i_img, cond, msg, img in generated:
            img01 = (img[0] + 1.0) / 2.0
            attacked = apply_attack(img01, spec)
            x = (2.0 * attacked - 1.0)[None]
            from .image_watermark import extract_bits, bits_from_logits
            bits = bits_from_logits(extract_bits(extractor, x))
            verdict = presence_test(bits, msg.bits, alpha_level)
            cls = classify_watermark(bits, registry)
            hits += int(verdict.present)
            correct += int(cls.best_index == cond)
            per_image.append({
                "attack": spec.label(), "image": int(i_img), "condition": int(cond),
                "matches": verdict.matches, "k": verdict.k,
                "p_value": verdict.p_value, "present": bool(verdict.present),
                "classified": int(cls.best_index), "margin": int(cls.margin),
            })
        presence[a_idx] = hits / len(generated)
        accuracy[a_idx] = correct / len(generated)

    # Negatives: clean reconstructions, identity attack, round-robin reference.
    with ad.no_grad():
        clean = autoencoder(Tensor(corpus)).data
    fp = 0
    for i_img in range(clean.shape[0]):
        from .image_watermark import extract_bits, bits_from_logits
        bits = bits_from_logits(extract_bits(extractor, clean[i_img]))
        msg = registry[i_img % n_cond]
        verdict = presence_test(bits, msg.bits, alpha_level)
        fp += int(verdict.present)
        per_image.append({
            "attack": "clean", "image": int(i_img), "condition": -1,
            "matches": verdict.matches, "k": verdict.k,
            "p_value": verdict.p_value, "present": bool(verdict.present),
            "classified": -1, "margin": 0,
        })
    return AttackReport(
        attack_labels=labels,
        presence_rate=presence,
        classification_accuracy=accuracy,
        false_positive_rate=fp / clean.shape[0],
        n_positive=len(generated),
        n_negative=int(clean.shape[0]),
        per_image=per_image,
    )
