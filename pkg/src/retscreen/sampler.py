"""Class-balanced batch sampling and rotation/flip augmentation.

Balancing draws images with replacement, each weighted by the inverse of its
grade's frequency, so every present grade contributes 1/K of a batch in
expectation. Augmentation rotates about the image center with bilinear
interpolation (fill 0.5) and applies independent horizontal/vertical flips.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import N_GRADES, ImageId, LabelManifest
from .errors import ScreeningError


class EmptyManifestError(ScreeningError):
    pass


@dataclass(frozen=True)
class ClassDistribution:
    counts: np.ndarray
    frequencies: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def class_distribution(manifest: LabelManifest) -> ClassDistribution:
    if len(manifest) == 0:
        raise EmptyManifestError("manifest has no entries")
    counts = manifest.counts()
    return ClassDistribution(counts=counts, frequencies=counts / counts.sum())


@dataclass(frozen=True)
class SamplingWeights:
    """Per-image draw probabilities over a canonical (sorted) id order."""

    ids: tuple[ImageId, ...]
    probs: np.ndarray


def build_sampling_weights(manifest: LabelManifest) -> SamplingWeights:
    """Inverse-frequency weights: an image of grade c gets (1/K_present)/count_c,
    so each present grade carries equal total mass and the weights sum to 1."""
    dist = class_distribution(manifest)
    present = int((dist.counts > 0).sum())
    ids = tuple(manifest.ids())
    probs = np.empty(len(ids), dtype=np.float64)
    for i, image_id in enumerate(ids):
        grade = manifest.entries[image_id]
        probs[i] = 1.0 / (present * dist.counts[grade])
    return SamplingWeights(ids=ids, probs=probs)


def uniform_weights(manifest: LabelManifest) -> SamplingWeights:
    """Uniform draws over the dataset: the natural class distribution."""
    if len(manifest) == 0:
        raise EmptyManifestError("manifest has no entries")
    ids = tuple(manifest.ids())
    return SamplingWeights(ids=ids, probs=np.full(len(ids), 1.0 / len(ids)))


def sample_batch(weights: SamplingWeights, batch_size: int, rng: np.random.Generator) -> list[ImageId]:
    """batch_size independent draws with replacement from the weight table."""
    if batch_size == 0:
        return []
    picks = rng.choice(len(weights.ids), size=batch_size, replace=True, p=weights.probs)
    return [weights.ids[int(i)] for i in picks]


@dataclass(frozen=True)
class AugmentSpec:
    rotation_deg: float
    hflip: bool
    vflip: bool


IDENTITY_AUGMENT = AugmentSpec(rotation_deg=0.0, hflip=False, vflip=False)


def random_augment_spec(rng: np.random.Generator) -> AugmentSpec:
    """Rotation uniform in [0, 360), each flip with probability 1/2."""
    rotation = float(rng.uniform(0.0, 360.0))
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    return AugmentSpec(rotation, hflip, vflip)


def rotate_bilinear(img: np.ndarray, degrees: float, fill: float = 0.5) -> np.ndarray:
    """Rotate about the image center, bilinear sampling with a constant fill
    outside the source frame. Positive 90 equals np.rot90(img, k=-1); grid-
    aligned angles reproduce exact index permutations up to float noise."""
    if degrees % 360.0 == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    rows = np.arange(h, dtype=np.float64)[:, None] - cr
    cols = np.arange(w, dtype=np.float64)[None, :] - cc
    # Inverse map: pull each destination pixel from the source rotated the
    # opposite way.
    src_r = rows * cos_t - cols * sin_t + cr
    src_c = rows * sin_t + cols * cos_t + cc
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0
    valid = (src_r >= 0.0) & (src_r <= h - 1) & (src_c >= 0.0) & (src_c <= w - 1)
    r0c = np.clip(r0, 0, h - 1)
    r1c = np.clip(r0 + 1, 0, h - 1)
    c0c = np.clip(c0, 0, w - 1)
    c1c = np.clip(c0 + 1, 0, w - 1)
    img64 = img.astype(np.float64)
    top = img64[r0c, c0c] * (1.0 - fc[..., None]) + img64[r0c, c1c] * fc[..., None]
    bot = img64[r1c, c0c] * (1.0 - fc[..., None]) + img64[r1c, c1c] * fc[..., None]
    out = top * (1.0 - fr[..., None]) + bot * fr[..., None]
    out[~valid] = fill
    return out.astype(img.dtype)


def augment(img: np.ndarray, spec: AugmentSpec, fill: float = 0.5) -> np.ndarray:
    """Apply rotation then the configured flips to a square H x W x 3 image."""
    out = rotate_bilinear(img, spec.rotation_deg, fill=fill)
    if spec.hflip:
        out = out[:, ::-1]
    if spec.vflip:
        out = out[::-1, :]
    return np.ascontiguousarray(out)
