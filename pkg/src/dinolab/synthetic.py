"""Procedural texture dataset in MVTec layout for desk-scale experiments.

Three texture categories (stripes, checker, blobs); test anomalies are pasted
regions of colour noise, a flat off-palette colour, or a foreign texture
taken from another category.  Everything is drawn from one seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .encoder import ConfigurationError

CATEGORIES = ("stripes", "checker", "blobs")
DEFECTS = ("noise", "color", "foreign")
MIN_SIZE = 42  # largest pasted defect is 32 px with a 4 px margin

_PALETTES = {
    "stripes": ((0.10, 0.15, 0.45), (0.92, 0.88, 0.75)),
    "checker": ((0.45, 0.25, 0.10), (0.95, 0.60, 0.20)),
    "blobs": ((0.10, 0.35, 0.12), (0.55, 0.80, 0.35)),
}


def _blend(t: np.ndarray, palette) -> np.ndarray:
    a, b = (np.asarray(c, dtype=np.float64) for c in palette)
    return a + t[..., None] * (b - a)


def texture(category: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One normal texture image, float RGB in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if category == "stripes":
        ang = np.deg2rad(30 + rng.uniform(-5, 5))
        t = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(ang) + yy * np.sin(ang)) / 10.0 + rng.uniform(0, 2 * np.pi))
    elif category == "checker":
        cell = 10.0
        ox, oy = rng.uniform(0, 2 * cell, size=2)
        t = ((np.floor((xx + ox) / cell) + np.floor((yy + oy) / cell)) % 2).astype(np.float64)
        t = gaussian_filter(t, 0.8)
    elif category == "blobs":
        t = gaussian_filter(rng.standard_normal((size, size)), 4.0, mode="wrap")
        t = 1 / (1 + np.exp(-t / (t.std() + 1e-8) * 2.5))
    else:
        raise ValueError(f"unknown category {category!r}")
    img = _blend(t, _PALETTES[category])
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1)


def paste_anomaly(img: np.ndarray, category: str, defect: str, rng: np.random.Generator):
    """Paste one anomalous region; returns ``(image, mask)``."""
    size = img.shape[0]
    side = int(rng.integers(16, 33))
    y0, x0 = rng.integers(4, size - side - 4, size=2)
    yy, xx = np.mgrid[0:side, 0:side]
    r = (side - 1) / 2
    region = ((yy - r) ** 2 + (xx - r) ** 2) <= r ** 2 if rng.random() < 0.5 else np.ones((side, side), bool)
    if defect == "noise":
        patch = rng.uniform(0, 1, (side, side, 3))
    elif defect == "color":
        patch = np.broadcast_to(np.asarray([(0.9, 0.1, 0.8), (0.1, 0.9, 0.9), (0.95, 0.95, 0.1)][rng.integers(3)]), (side, side, 3))
    elif defect == "foreign":
        other = [c for c in CATEGORIES if c != category][rng.integers(len(CATEGORIES) - 1)]
        patch = texture(other, side, rng)
    else:
        raise ValueError(f"unknown defect {defect!r}")
    out = img.copy()
    mask = np.zeros((size, size), bool)
    sl = (slice(y0, y0 + side), slice(x0, x0 + side))
    out[sl][region] = patch[region]
    mask[sl] = region
    return out, mask


def _save(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


def make_texture_dataset(root: str | Path, seed: int = 0, size: int = 112, n_train: int = 60,
                         n_test_good: int = 15, n_test_defect: int = 8,
                         categories=CATEGORIES) -> Path:
    """Write the dataset under ``root`` in MVTec layout and return ``root``."""
    if size < MIN_SIZE:
        raise ConfigurationError(f"synthetic images need size >= {MIN_SIZE} to fit a defect, got {size}")
    root = Path(root)
    rng = np.random.default_rng(seed)
    for cat in categories:
        for i in range(n_train):
            _save(texture(cat, size, rng), root / cat / "train" / "good" / f"{i:03d}.png")
        for i in range(n_test_good):
            _save(texture(cat, size, rng), root / cat / "test" / "good" / f"{i:03d}.png")
        for defect in DEFECTS:
            for i in range(n_test_defect):
                img, mask = paste_anomaly(texture(cat, size, rng), cat, defect, rng)
                _save(img, root / cat / "test" / defect / f"{i:03d}.png")
                _save(mask.astype(np.float64), root / cat / "ground_truth" / defect / f"{i:03d}_mask.png")
    return root
