"""Synthetic 16x16 shape dataset and the corruption suite.

Four classes on a -1 background with per-image foreground intensity in
[0.7, 1.0] and integer translations up to 2 px: disk, hollow square,
cross, diagonal stripes. Corruptions cover noise, digital, and blur
families at five severities; outputs are clamped to [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "ToyDataset",
    "CorruptionSpec",
    "CLASS_NAMES",
    "CORRUPTION_KINDS",
    "DEFAULT_SIZES",
    "generate_dataset",
    "corrupt",
    "corrupt_raw",
    "disk_mask",
]

CLASS_NAMES = ("disk", "hollow_square", "cross", "diagonal_stripes")
CORRUPTION_KINDS = ("gaussian_noise", "impulse_noise", "contrast",
                    "gaussian_blur", "pixelate")
DEFAULT_SIZES = {"train": 2048, "val": 256, "test": 512}

IMAGE_SIZE = 16
DISK_RADIUS = 4.5

SEVERITY_TABLE = {
    "gaussian_noise": (0.1, 0.2, 0.35, 0.5, 0.7),      # noise std
    "impulse_noise": (0.02, 0.05, 0.1, 0.17, 0.25),    # flip probability
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.2),            # deviation scale
    "gaussian_blur": (0.5, 0.75, 1.0, 1.5, 2.0),       # blur std
    "pixelate": (2, 2, 4, 4, 8),                       # block edge
}


@dataclass
class ToyDataset:
    images: np.ndarray          # (N, 1, 16, 16) in [-1, 1]
    labels: np.ndarray          # (N,) ints in {0..3}
    tags: np.ndarray            # (N,) strings from {train, val, test}
    seed: int

    def subset(self, tag: str):
        idx = self.tags == tag
        return self.images[idx], self.labels[idx]


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 0 <= self.severity <= 5:
            raise ValueError(f"severity must be in 0..5, got {self.severity}")

    def param(self):
        if self.severity == 0:
            return None
        return SEVERITY_TABLE[self.kind][self.severity - 1]


def disk_mask(cy: float, cx: float, radius: float = DISK_RADIUS) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def _shape_mask(label: int, dy: int, dx: int) -> np.ndarray:
    cy, cx = 7.5 + dy, 7.5 + dx
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    if label == 0:
        return disk_mask(cy, cx)
    if label == 1:
        half = 4.5
        inside = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        core = (np.abs(yy - cy) <= half - 2) & (np.abs(xx - cx) <= half - 2)
        return inside & ~core
    if label == 2:
        arm = 5.5
        thick = 1.5
        vert = (np.abs(xx - cx) <= thick) & (np.abs(yy - cy) <= arm)
        horz = (np.abs(yy - cy) <= thick) & (np.abs(xx - cx) <= arm)
        return vert | horz
    if label == 3:
        return ((yy + xx - dy - dx) % 4) < 2
    raise ValueError(f"unknown label {label}")


def _render(label: int, rng: np.random.Generator) -> np.ndarray:
    dy, dx = rng.integers(-2, 3, size=2)
    intensity = rng.uniform(0.7, 1.0)
    img = np.full((IMAGE_SIZE, IMAGE_SIZE), -1.0)
    img[_shape_mask(label, int(dy), int(dx))] = intensity
    return img[None, :, :]


def generate_dataset(seed: int, sizes: dict | None = None) -> ToyDataset:
    """Deterministic, label-balanced dataset split into train/val/test."""
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    for tag, n in sizes.items():
        if n <= 0:
            raise ValueError(f"split {tag!r} must be positive, got {n}")
    rng = np.random.default_rng(seed)
    images, labels, tags = [], [], []
    for tag in ("train", "val", "test"):
        n = sizes.get(tag, 0)
        for i in range(n):
            label = i % len(CLASS_NAMES)  # round-robin keeps counts within 1
            images.append(_render(label, rng))
            labels.append(label)
            tags.append(tag)
    return ToyDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        tags=np.asarray(tags),
        seed=seed,
    )


def add_gaussian_noise(x, std, rng):
    return x + std * rng.standard_normal(x.shape)


def add_impulse_noise(x, prob, rng):
    hit = rng.random(x.shape) < prob
    signs = np.where(rng.random(x.shape) < 0.5, -1.0, 1.0)
    return np.where(hit, signs, x)


def scale_contrast(x, scale, _rng=None):
    m = x.mean()
    return m + scale * (x - m)


def blur(x, std, _rng=None):
    flat = ndimage.gaussian_filter(x.reshape(IMAGE_SIZE, IMAGE_SIZE),
                                   sigma=std, mode="nearest")
    return flat.reshape(x.shape)


def pixelate(x, block, _rng=None):
    b = int(block)
    h = IMAGE_SIZE // b
    img = x.reshape(IMAGE_SIZE, IMAGE_SIZE)
    coarse = img.reshape(h, b, h, b).mean(axis=(1, 3))
    return np.repeat(np.repeat(coarse, b, axis=0), b, axis=1).reshape(x.shape)


_CORRUPTION_FNS = {
    "gaussian_noise": add_gaussian_noise,
    "impulse_noise": add_impulse_noise,
    "contrast": scale_contrast,
    "gaussian_blur": blur,
    "pixelate": pixelate,
}


def corrupt_raw(x: np.ndarray, spec: CorruptionSpec,
                rng: np.random.Generator) -> np.ndarray:
    """Apply the corruption without the final clamp (used by tests)."""
    x = np.asarray(x, dtype=np.float64)
    if spec.severity == 0:
        return x.copy()
    return _CORRUPTION_FNS[spec.kind](x, spec.param(), rng)


def corrupt(x: np.ndarray, spec: CorruptionSpec,
            rng: np.random.Generator) -> np.ndarray:
    """Corrupted copy of `x`, clamped back to the model range [-1, 1]."""
    return np.clip(corrupt_raw(x, spec, rng), -1.0, 1.0)
