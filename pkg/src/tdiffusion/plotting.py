"""Matplotlib figures written next to the tab-separated reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import HEATMAP_CMAP, BenchReport, QualityReport  # noqa: E402

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.titlesize": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "savefig.dpi": 120,
    }
)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def _hwc(image):
    arr = np.asarray(image, dtype=np.float64)
    return np.clip(arr.transpose(1, 2, 0), 0, 1) if arr.shape[0] == 3 else arr


def heatmap_panel(reference, candidate, scale: float, path, title: str = "") -> Path:
    """Reference, enhanced image and error heatmap side by side."""
    ref, cand = _hwc(reference), _hwc(candidate)
    err = np.abs(ref - cand).mean(axis=-1)
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    axes[0].imshow(ref)
    axes[0].set_title("reference")
    axes[1].imshow(cand)
    axes[1].set_title("enhanced")
    im = axes[2].imshow(err, cmap=HEATMAP_CMAP, vmin=0.0, vmax=scale)
    axes[2].set_title("abs. error")
    for ax in axes:
        ax.set_axis_off()
    fig.colorbar(im, ax=axes[2], fraction=0.046, pad=0.04)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def quality_chart(report: QualityReport, path) -> Path:
    names = [r.filename for r in report.rows]
    x = np.arange(len(names))
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(max(4, 0.4 * len(names) + 2), 5), sharex=True)
    finite = [min(r.psnr, 100.0) for r in report.rows]
    ax1.bar(x, finite, color="tab:blue")
    ax1.axhline(report.mean_psnr if np.isfinite(report.mean_psnr) else 100.0, color="k", lw=0.8, ls="--")
    ax1.set_ylabel("PSNR (dB)")
    ax2.bar(x, [100 * r.ssim for r in report.rows], color="tab:red")
    ax2.axhline(100 * report.mean_ssim, color="k", lw=0.8, ls="--")
    ax2.set_ylabel("SSIM (%)")
    ax2.set_xticks(x, names, rotation=60, ha="right")
    return _save(fig, path)


def bench_chart(reports: list[BenchReport], path) -> Path:
    labels = [r.label for r in reports]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 3))
    ax1.bar(labels, [r.parameters / 1e6 for r in reports], color="tab:gray")
    ax1.set_ylabel("parameters (M)")
    ax2.bar(labels, [r.fps for r in reports], color="tab:green")
    ax2.set_ylabel("FPS")
    res = reports[0].resolution
    fig.suptitle(f"{res[0]}x{res[1]}, {reports[0].steps} sampling steps")
    return _save(fig, path)


def loss_curve(metrics_path, path) -> Path:
    data = np.loadtxt(metrics_path, ndmin=2)
    fig, ax = plt.subplots(figsize=(5, 3))
    if data.size:
        ax.plot(data[:, 0], data[:, 1], lw=0.6, alpha=0.5, color="tab:blue")
        k = max(1, len(data) // 50)
        if len(data) >= k:
            smooth = np.convolve(data[:, 1], np.ones(k) / k, mode="valid")
            ax.plot(data[k - 1 :, 0], smooth, color="tab:blue")
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("SmoothL1 loss")
    return _save(fig, path)
