"""8-bit PNG I/O and conversions between (3, H, W) float arrays and files."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


def read_image(path: str | Path) -> np.ndarray:
    """Decode any RGB-convertible image into a float64 (3, H, W) array in [0, 1]."""
    with Image.open(path) as im:
        im.load()
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8(image) -> np.ndarray:
    """(3, H, W) values in [0, 1] -> (H, W, 3) uint8, rounding to nearest."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().double().numpy()
    image = np.asarray(image, dtype=np.float64)
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_png(path: str | Path, image) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = image if (isinstance(image, np.ndarray) and image.dtype == np.uint8) else to_uint8(image)
    Image.fromarray(arr).save(path, format="PNG")
    return path


def list_images(directory: str | Path) -> list[Path]:
    """Regular, non-hidden files in ``directory``, sorted by name."""
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.is_file() and not p.name.startswith("."))


def load_stack(paths) -> torch.Tensor:
    return torch.from_numpy(np.stack([read_image(p) for p in paths])).float()
