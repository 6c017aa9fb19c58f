"""Poison-removal transforms applied to every training image.

Two per-image preprocessors that a defender might run before training:

- Gaussian blur: separable convolution with a normalized kernel,
  reflect-padded borders, each channel filtered independently.
- Bit-depth reduction: channel values quantized to 2^b levels with
  round-half-away-from-zero.

Both preserve labels, ids, shapes, and the [0, 1] pixel range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import datapipe

KINDS = ("none", "gaussian-blur", "bit-depth-reduction")


@dataclass(frozen=True)
class DefensePolicy:
    kind: str = "none"
    sigma: float = 0.8
    radius: int = 2
    bits: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.kind == "gaussian-blur":
            if self.sigma <= 0:
                raise ValueError("blur sigma must be positive")
            if self.radius < 1:
                raise ValueError("blur radius must be at least 1")
        if self.kind == "bit-depth-reduction" and not (1 <= self.bits <= 8):
            raise ValueError("bit depth must be in [1, 8]")


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    """Normalized 1-D Gaussian weights over offsets -radius..radius."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if radius < 1:
        raise ValueError("radius must be at least 1")
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-0.5 * (offsets / sigma) ** 2)
    return weights / weights.sum()


def gaussian_blur(img: np.ndarray, sigma: float = 0.8, radius: int = 2) -> np.ndarray:
    """Separable Gaussian filter of one (h, w, c) image, reflect padding."""
    kernel = gaussian_kernel(sigma, radius)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError("expected one (h, w, c) image")
    r = radius
    padded = np.pad(img, ((r, r), (0, 0), (0, 0)), mode="reflect")
    rows = sum(kernel[i] * padded[i:i + img.shape[0]] for i in range(2 * r + 1))
    padded = np.pad(rows, ((0, 0), (r, r), (0, 0)), mode="reflect")
    out = sum(kernel[i] * padded[:, i:i + img.shape[1]] for i in range(2 * r + 1))
    # a convex combination of values in [0,1] stays there; clip sub-ulp noise
    return np.clip(out, 0.0, 1.0)


def bit_depth_reduce(img: np.ndarray, bits: int = 3) -> np.ndarray:
    """Quantize channel values to 2^bits levels, round half away from zero."""
    if not (1 <= bits <= 8):
        raise ValueError("bit depth must be in [1, 8]")
    levels = float(2 ** bits - 1)
    img = np.asarray(img, dtype=np.float64)
    return np.floor(img * levels + 0.5) / levels


def apply_policy(dataset: datapipe.Dataset, policy: DefensePolicy) -> datapipe.Dataset:
    """Transform every image; labels, ids and viewpoints are untouched."""
    if policy.kind == "none":
        return dataset
    if policy.kind == "gaussian-blur":
        def fn(px):
            return gaussian_blur(px, policy.sigma, policy.radius)
    else:
        def fn(px):
            return bit_depth_reduce(px, policy.bits)
    rows = [datapipe.LabeledImage(fn(im.pixels), im.label, im.id, im.viewpoint)
            for im in dataset.images]
    return datapipe.Dataset(rows, dataset.num_classes)
