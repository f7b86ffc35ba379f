"""Image quality metrics, error heatmaps and throughput benchmarking.

All image inputs are (3, H, W) arrays or tensors with values in [0, 1].
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from matplotlib import colormaps
from scipy.ndimage import correlate1d

from .schedule import ResolutionSchedule
from .tdiff import NoiseSource, TDiffusion

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
HEATMAP_CMAP = "jet"


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _pair(reference, candidate) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_array(reference), _as_array(candidate)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(reference, candidate) -> float:
    """PSNR in dB for unit dynamic range. Identical inputs give ``math.inf``."""
    a, b = _pair(reference, candidate)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation over the last two axes, then drop the border
    # so only windows fully inside the image remain
    out = correlate1d(correlate1d(x, g, axis=-2, mode="reflect"), g, axis=-1, mode="reflect")
    r = len(g) // 2
    return out[..., r:-r, r:-r]


def ssim_map(reference, candidate, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    a, b = _pair(reference, candidate)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < window:
        raise ValueError(f"image {a.shape[-2:]} is smaller than the {window}x{window} SSIM window")
    g = gaussian_window(window, sigma)
    c1, c2 = (SSIM_K1 * 1.0) ** 2, (SSIM_K2 * 1.0) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    aa = _filter_valid(a * a, g) - mu_a * mu_a
    bb = _filter_valid(b * b, g) - mu_b * mu_b
    ab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (aa + bb + c2)
    return num / den


def ssim(reference, candidate) -> float:
    """Gaussian-windowed SSIM (11x11, sigma 1.5, K1=0.01, K2=0.03, range 1),
    averaged over channels and window positions."""
    return float(np.mean(ssim_map(reference, candidate)))


def error_heatmap(reference, candidate, scale: float = 0.5, cmap: str = HEATMAP_CMAP) -> np.ndarray:
    """Per-pixel mean absolute error over channels, mapped through a
    blue-to-red colormap. ``scale`` is the error rendered as full red.

    Returns an (H, W, 3) uint8 image.
    """
    a, b = _pair(reference, candidate)
    if a.ndim == 2:
        a, b = a[None], b[None]
    err = np.abs(a - b).mean(axis=0)
    norm = np.clip(err / scale, 0.0, 1.0)
    return colormaps[cmap](norm, bytes=True)[..., :3]


@dataclass
class QualityRow:
    filename: str
    psnr: float
    ssim: float


@dataclass
class QualityReport:
    rows: list[QualityRow] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows])) if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else math.nan

    def dumps(self) -> str:
        """Tab-separated rows (SSIM as a percentage) plus a ``mean`` footer."""
        lines = ["filename\tpsnr\tssim"]
        lines += [f"{r.filename}\t{r.psnr:.4f}\t{100 * r.ssim:.4f}" for r in self.rows]
        lines.append(f"# mean\t{self.mean_psnr:.4f}\t{100 * self.mean_ssim:.4f}")
        lines.append(f"# count\t{self.count}")
        return "\n".join(lines) + "\n"


def evaluate_pairs(pairs) -> QualityReport:
    """``pairs`` yields ``(filename, reference, candidate)``."""
    return QualityReport([QualityRow(name, psnr(ref, cand), ssim(ref, cand)) for name, ref, cand in pairs])


@dataclass
class BenchReport:
    label: str
    fps: float
    warmup: int
    timed: int
    resolution: tuple[int, int]
    parameters: int
    steps: int

    def dumps(self) -> str:
        return (
            f"{self.label}\t{self.resolution[0]}x{self.resolution[1]}\t{self.steps}\t"
            f"{self.parameters}\t{self.parameters / 1e6:.2f}\t{self.fps:.4f}\t{self.warmup}\t{self.timed}"
        )

    HEADER = "label\tresolution\tsteps\tparams\tparams_m\tfps\twarmup\ttimed"


def fps_bench(
    denoiser,
    chroma,
    diffusion: TDiffusion,
    resolution,
    warmup: int = 2,
    timed: int = 30,
    seed: int = 0,
    label: str = "model",
) -> BenchReport:
    """Time complete sampling passes on a random condition image.

    The schedule's boundaries are kept and re-based onto ``resolution``.
    FPS is ``timed / total seconds``; values depend on the hardware.
    """
    if timed < 30:
        raise ValueError(f"timed passes must be at least 30, got {timed}")
    res = ResolutionSchedule(diffusion.T, tuple(resolution), diffusion.resolution.boundaries)
    engine = TDiffusion(diffusion.noise, res, diffusion.upsample_mode, diffusion.increase_variance)
    params = sum(p.numel() for p in denoiser.parameters())
    if chroma is not None:
        params += sum(p.numel() for p in chroma.parameters())
    gen = torch.Generator().manual_seed(seed)
    condition = torch.rand((1, 3, *res.base_resolution), generator=gen)
    rng = NoiseSource(seed)
    denoiser.eval()
    if chroma is not None:
        chroma.eval()
    for _ in range(warmup):
        engine.sample(condition, denoiser, chroma, rng)
    start = time.perf_counter()
    for _ in range(timed):
        engine.sample(condition, denoiser, chroma, rng)
    elapsed = time.perf_counter() - start
    return BenchReport(label, timed / elapsed, warmup, timed, res.base_resolution, params, diffusion.T)
