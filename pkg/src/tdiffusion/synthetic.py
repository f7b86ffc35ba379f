"""Procedural normal-light test images (smooth shading plus soft blobs)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .images import write_png


def synthetic_image(rng: np.random.Generator, size=(64, 64), blobs: int = 5) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w]).reshape(2, 1, 1)
    base = rng.uniform(0.35, 0.85, size=3)
    tilt = rng.uniform(-0.25, 0.25, size=(3, 2))
    img = base[:, None, None] + tilt[:, :1, None] * (yy - 0.5) + tilt[:, 1:, None] * (xx - 0.5)
    for _ in range(blobs):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        ry, rx = rng.uniform(0.06, 0.25, size=2)
        colour = rng.uniform(0.05, 0.95, size=3)
        mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0
        img = np.where(mask[None], colour[:, None, None], img)
    img = gaussian_filter(img, sigma=(0, 1.0, 1.0))
    return np.clip(img, 0.0, 1.0)


def synthetic_corpus(n: int, size=(64, 64), seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, size) for _ in range(n)]


def write_corpus(directory: str | Path, n: int, size=(64, 64), seed: int = 0) -> list[Path]:
    directory = Path(directory)
    return [
        write_png(directory / f"img{i:03d}.png", img)
        for i, img in enumerate(synthetic_corpus(n, size, seed))
    ]
