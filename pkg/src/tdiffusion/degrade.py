"""Synthetic low-light pairs via a global gamma curve and illumination scale.

``low = clip(illum * normal ** gamma, 0, 1)`` with one ``(gamma, illum)``
draw per image. With ``gamma >= 1`` and ``illum <= 1`` the output never
brightens any pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .images import list_images, read_image, to_uint8, write_png

MANIFEST_NAME = "manifest.txt"
MANIFEST_HEADER = "# degrade manifest v1"


@dataclass(frozen=True)
class DegradeParams:
    gamma_range: tuple[float, float] = (1.5, 5.0)
    illum_range: tuple[float, float] = (0.3, 0.8)
    seed: int = 0

    def __post_init__(self):
        g_lo, g_hi = self.gamma_range
        i_lo, i_hi = self.illum_range
        if not 1.0 <= g_lo <= g_hi:
            raise ValueError(f"gamma range must satisfy 1 <= lo <= hi, got {self.gamma_range}")
        if not 0.0 < i_lo <= i_hi <= 1.0:
            raise ValueError(f"illumination range must satisfy 0 < lo <= hi <= 1, got {self.illum_range}")

    def rng_for(self, index: int) -> np.random.Generator:
        """Independent substream for the ``index``-th image."""
        return np.random.default_rng([int(self.seed), int(index)])


@dataclass
class ImagePair:
    normal: np.ndarray
    low: np.ndarray
    applied_gamma: float
    applied_illum: float


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return image


def apply_degradation(image: np.ndarray, gamma: float, illum: float) -> np.ndarray:
    return np.clip(illum * np.power(image, gamma), 0.0, 1.0)


def degrade_image(image: np.ndarray, params: DegradeParams, rng: np.random.Generator) -> ImagePair:
    image = _check_image(image)
    gamma = float(rng.uniform(*params.gamma_range))
    illum = float(rng.uniform(*params.illum_range))
    return ImagePair(image, apply_degradation(image, gamma, illum), gamma, illum)


@dataclass
class ManifestEntry:
    filename: str
    gamma: float
    illum: float


@dataclass
class Manifest:
    seed: int
    gamma_range: tuple[float, float]
    illum_range: tuple[float, float]
    entries: list[ManifestEntry] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)

    def dumps(self) -> str:
        lines = [
            MANIFEST_HEADER,
            f"# seed\t{self.seed}",
            f"# gamma_range\t{self.gamma_range[0]:.6f}\t{self.gamma_range[1]:.6f}",
            f"# illum_range\t{self.illum_range[0]:.6f}\t{self.illum_range[1]:.6f}",
            "filename\tgamma\tillum",
        ]
        lines += [f"{e.filename}\t{e.gamma:.6f}\t{e.illum:.6f}" for e in self.entries]
        lines.append("# errors")
        lines += [f"{name}\t{msg}" for name, msg in self.errors]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Manifest":
        meta, entries, errors = {}, [], []
        in_errors = False
        for line in text.splitlines():
            if not line or line == MANIFEST_HEADER or line == "filename\tgamma\tillum":
                continue
            if line == "# errors":
                in_errors = True
            elif line.startswith("# "):
                key, *vals = line[2:].split("\t")
                meta[key] = vals
            elif in_errors:
                name, _, msg = line.partition("\t")
                errors.append((name, msg))
            else:
                name, g, i = line.split("\t")
                entries.append(ManifestEntry(name, float(g), float(i)))
        return cls(
            int(meta["seed"][0]),
            tuple(float(v) for v in meta["gamma_range"]),
            tuple(float(v) for v in meta["illum_range"]),
            entries,
            errors,
        )


def read_manifest(path: str | Path) -> Manifest:
    return Manifest.loads(Path(path).read_text())


def build_pair_dataset(src_dir: str | Path, dst_dir: str | Path, params: DegradeParams) -> Manifest:
    """Degrade every decodable image in ``src_dir`` into ``dst_dir``.

    Writes ``dst_dir/normal/<stem>.png``, ``dst_dir/low/<stem>.png`` and
    ``dst_dir/manifest.txt``. Undecodable files are recorded in the
    manifest's error section and skipped.
    """
    src_dir, dst_dir = Path(src_dir), Path(dst_dir)
    if not src_dir.is_dir():
        raise FileNotFoundError(f"source directory not found: {src_dir}")
    files = list_images(src_dir)
    if not files:
        raise ValueError(f"source directory is empty: {src_dir}")
    manifest = Manifest(params.seed, tuple(params.gamma_range), tuple(params.illum_range))
    seen: set[str] = set()
    for index, path in enumerate(files):
        name = path.stem + ".png"
        if name in seen:
            manifest.errors.append((path.name, f"duplicate output name {name}"))
            continue
        try:
            image = read_image(path)
        except Exception as exc:
            manifest.errors.append((path.name, f"{type(exc).__name__}: {exc}".replace("\n", " ")))
            continue
        seen.add(name)
        pair = degrade_image(image, params, params.rng_for(index))
        write_png(dst_dir / "normal" / name, to_uint8(pair.normal))
        write_png(dst_dir / "low" / name, to_uint8(pair.low))
        manifest.entries.append(ManifestEntry(name, pair.applied_gamma, pair.applied_illum))
    dst_dir.mkdir(parents=True, exist_ok=True)
    (dst_dir / MANIFEST_NAME).write_text(manifest.dumps())
    return manifest
