"""Procedural class-labelled texture images for smoke-scale training runs."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

CLASSES = ("stripes", "blobs", "checks")


def _palette(rng, t: np.ndarray) -> np.ndarray:
    """Map a [0, 1] field to RGB between two random colours."""
    c0, c1 = rng.uniform(0, 255, 3), rng.uniform(0, 255, 3)
    return t[..., None] * c1 + (1.0 - t[..., None]) * c0


def stripes(rng, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ang = rng.uniform(0, np.pi)
    period = rng.uniform(6.0, 16.0)
    phase = rng.uniform(0, 2 * np.pi)
    t = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(ang) + yy * np.sin(ang)) / period + phase)
    return _palette(rng, t)


def blobs(rng, h: int, w: int) -> np.ndarray:
    field = gaussian_filter(rng.standard_normal((h, w)), sigma=rng.uniform(6.0, 12.0), mode="wrap")
    t = (field - field.min()) / (np.ptp(field) + 1e-12)
    return _palette(rng, t)


def checks(rng, h: int, w: int) -> np.ndarray:
    cell = int(rng.integers(3, 7))
    oy, ox = rng.integers(0, cell, 2)
    yy, xx = np.mgrid[0:h, 0:w]
    t = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    return _palette(rng, t)


_MAKERS = (stripes, blobs, checks)


def texture(label: int, rng: np.random.Generator, h: int = 128, w: int = 128, noise: float = 6.0) -> np.ndarray:
    """One RGB uint8 image of class ``label``."""
    img = _MAKERS[label](rng, h, w) + rng.normal(0.0, noise, (h, w, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def texture_corpus(n_per_class: int, seed: int = 0, h: int = 128, w: int = 128):
    """Returns (images list, labels array), classes interleaved."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(n_per_class):
        for label in range(len(_MAKERS)):
            images.append(texture(label, rng, h, w))
            labels.append(label)
    return images, np.array(labels)
