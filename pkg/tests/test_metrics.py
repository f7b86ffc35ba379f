import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from matplotlib import colormaps
from numpy.testing import assert_allclose

from tdiffusion.backbone import DenoiserNetwork, NetworkConfig
from tdiffusion.chroma import ChromaBalancer
from tdiffusion.metrics import (
    QualityReport,
    error_heatmap,
    evaluate_pairs,
    fps_bench,
    psnr,
    ssim,
    ssim_map,
)
from tdiffusion.schedule import build_noise_schedule, build_resolution_schedule
from tdiffusion.tdiff import TDiffusion

skimage_metrics = pytest.importorskip("skimage.metrics")


def rand_image(seed, size=(24, 24)):
    return np.random.default_rng(seed).random((3, *size))


def test_psnr_identical_is_infinite():
    a = rand_image(0)
    assert psnr(a, a) == math.inf


def test_psnr_all_wrong_is_zero_db():
    assert psnr(np.zeros((3, 4, 4)), np.ones((3, 4, 4))) == 0.0


def test_psnr_uniform_offset():
    a = np.full((3, 8, 8), 0.2)
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-9


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ssim_self_is_exactly_one(seed):
    a = rand_image(seed, (16, 16))
    assert ssim(a, a) == 1.0


def test_ssim_negative_for_inverted_binary():
    a = (np.random.default_rng(1).random((3, 32, 32)) > 0.5).astype(float)
    assert ssim(a, 1.0 - a) < 0.0


def test_ssim_tiny_noise_on_constant():
    a = np.full((3, 32, 32), 0.5)
    b = a + 1e-3 * np.random.default_rng(2).standard_normal(a.shape)
    assert ssim(a, b) > 0.99


@pytest.mark.parametrize("seed", range(4))
def test_ssim_matches_reference_implementation(seed):
    a = rand_image(seed, (40, 33))
    b = np.clip(a + 0.1 * np.random.default_rng(seed + 10).standard_normal(a.shape), 0, 1)
    ours = ssim(a, b)
    ref = skimage_metrics.structural_similarity(
        a, b, channel_axis=0, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False, data_range=1.0,
    )
    assert abs(ours - ref) < 1e-9


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError, match="window"):
        ssim_map(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def test_heatmap_zero_error_is_uniform_blue():
    a = rand_image(3, (6, 7))
    hm = error_heatmap(a, a)
    assert hm.shape == (6, 7, 3) and hm.dtype == np.uint8
    low = np.asarray(colormaps["jet"](0.0, bytes=True)[:3])
    assert np.all(hm == low)
    assert hm[0, 0, 2] > hm[0, 0, 0]


def test_heatmap_single_red_pixel():
    a = np.zeros((3, 5, 5))
    b = a.copy()
    b[:, 2, 3] = 0.5
    hm = error_heatmap(a, b, scale=0.5)
    top = np.asarray(colormaps["jet"](1.0, bytes=True)[:3])
    assert np.all(hm[2, 3] == top)
    assert hm[2, 3, 0] > hm[2, 3, 2]
    mask = np.ones((5, 5), bool)
    mask[2, 3] = False
    assert np.all(hm[mask] == hm[0, 0])


def test_heatmap_midscale_is_intermediate():
    a = np.zeros((3, 2, 2))
    hm = error_heatmap(a, a + 0.25, scale=0.5)
    mid = np.asarray(colormaps["jet"](0.5, bytes=True)[:3])
    assert np.all(hm[0, 0] == mid)


def test_heatmap_deterministic_bytes():
    a, b = rand_image(4), rand_image(5)
    assert error_heatmap(a, b).tobytes() == error_heatmap(a, b).tobytes()


def test_heatmap_accepts_tensors():
    a = rand_image(6)
    assert np.array_equal(error_heatmap(torch.tensor(a), a * 0.5), error_heatmap(a, a * 0.5))


def test_quality_report_rows_and_means():
    pairs = [(f"{i}.png", rand_image(i), rand_image(i + 100)) for i in range(3)]
    report = evaluate_pairs(pairs)
    assert report.count == 3
    assert_allclose(report.mean_psnr, np.mean([psnr(r, c) for _, r, c in pairs]), atol=1e-12)
    assert_allclose(report.mean_ssim, np.mean([ssim(r, c) for _, r, c in pairs]), atol=1e-12)
    lines = report.dumps().splitlines()
    assert lines[0] == "filename\tpsnr\tssim"
    assert [ln.split("\t")[0] for ln in lines[1:4]] == ["0.png", "1.png", "2.png"]
    assert lines[-1] == "# count\t3"
    assert float(lines[1].split("\t")[2]) == pytest.approx(100 * report.rows[0].ssim, abs=1e-4)


def test_empty_report_is_nan():
    assert math.isnan(QualityReport().mean_psnr)


def tiny_bench_parts():
    net = DenoiserNetwork(NetworkConfig(base_channels=4, channel_multipliers=(1, 2), num_blocks=1))
    cb = ChromaBalancer()
    diff = TDiffusion(build_noise_schedule(4), build_resolution_schedule(4, (16, 16)))
    return net, cb, diff


def test_fps_bench_report():
    net, cb, diff = tiny_bench_parts()
    report = fps_bench(net, cb, diff, (16, 16), warmup=1, timed=30, label="tiny")
    assert report.fps > 0
    assert report.timed == 30 and report.warmup == 1
    assert report.steps == 4
    assert report.parameters == sum(p.numel() for p in net.parameters()) + sum(
        p.numel() for p in cb.parameters()
    )
    fields = report.dumps().split("\t")
    assert fields[0] == "tiny" and fields[1] == "16x16"


def test_fps_bench_requires_thirty_timed_passes():
    net, cb, diff = tiny_bench_parts()
    with pytest.raises(ValueError, match="30"):
        fps_bench(net, cb, diff, (16, 16), timed=29)


def test_fps_drops_when_resolution_doubles():
    net, cb, diff = tiny_bench_parts()
    small = fps_bench(net, cb, diff, (32, 32), warmup=1, timed=30)
    large = fps_bench(net, cb, diff, (64, 64), warmup=1, timed=30)
    assert large.fps < small.fps
