import math

import numpy as np
import pytest
import torch

from helpers import ReferenceDDPM
from tdiffusion.backbone import DenoiserNetwork, NetworkConfig
from tdiffusion.chroma import ChromaBalancer
from tdiffusion.schedule import ResolutionSchedule, build_noise_schedule, build_resolution_schedule
from tdiffusion.tdiff import DiffusionState, NoiseSource, TDiffusion, subsample, upsample

D = torch.float64


def engine(T=8, base=(8, 8), boundaries=None, beta=(0.1, 0.2), **kw):
    return TDiffusion(
        build_noise_schedule(T, *beta),
        build_resolution_schedule(T, base, boundaries),
        **kw,
    )


def test_noise_source_reproducible():
    a, b = NoiseSource(3), NoiseSource(3)
    assert torch.equal(a.draw((2, 3)), b.draw((2, 3)))
    state = a.state()
    x = a.draw((4,))
    a.set_state(state)
    assert torch.equal(a.draw((4,)), x)
    assert a.position == 2


def test_forward_step_zero_input():
    e = engine()
    noise = torch.randn(1, 3, 8, 8, dtype=D)
    out = e.forward_step(torch.zeros(1, 3, 8, 8, dtype=D), 1, noise)
    assert torch.equal(out, math.sqrt(e.noise.beta(1)) * noise)


def test_forward_step_constant_no_noise():
    e = engine()
    out = e.forward_step(torch.full((3, 8, 8), 0.7, dtype=D), 1, torch.zeros(3, 8, 8, dtype=D))
    assert torch.allclose(out, torch.full_like(out, math.sqrt(e.noise.gamma(1)) * 0.7), atol=0, rtol=0)


def test_forward_step_at_boundary_subsamples():
    e = engine()  # T=8: halvings after t=2 and t=4
    y_prev = torch.arange(64, dtype=D).reshape(1, 1, 8, 8)
    out = e.forward_step(y_prev, 3, torch.zeros(1, 1, 4, 4, dtype=D))
    assert out.shape[-2:] == (4, 4)
    hand = np.arange(64.0).reshape(8, 8)[0::2, 0::2] * math.sqrt(e.noise.gamma(3))
    np.testing.assert_allclose(out[0, 0].numpy(), hand, rtol=0, atol=1e-12)


def test_forward_step_rejects_mismatch():
    e = engine()
    with pytest.raises(ValueError):
        e.forward_step(torch.zeros(1, 3, 8, 8), 3, torch.zeros(1, 3, 8, 8))


def test_marginal_two_step_constant():
    e = engine(T=4, base=(4, 4), boundaries=(), beta=(0.1, 0.2))
    e = TDiffusion(build_noise_schedule(2, 0.1, 0.2), build_resolution_schedule(2, (4, 4), ()))
    out = e.forward_marginal(torch.ones(3, 4, 4, dtype=D), 2, torch.zeros(3, 4, 4, dtype=D))
    np.testing.assert_allclose(out.numpy(), math.sqrt(0.72), atol=1e-12)
    assert math.sqrt(0.72) == pytest.approx(0.8485, abs=1e-4)


def test_marginal_zero_mean_variance():
    e = engine(T=8, boundaries=())
    noise = torch.randn(20000, 1, 1, 1, dtype=D, generator=torch.Generator().manual_seed(0))
    e = TDiffusion(build_noise_schedule(8, 0.1, 0.2), ResolutionSchedule(8, (1, 1)))
    out = e.forward_marginal(torch.zeros(20000, 1, 1, 1, dtype=D), 5, noise)
    assert out.var().item() == pytest.approx(1 - e.noise.gamma_hat(5), rel=0.03)
    assert abs(out.mean().item()) < 0.02


def test_reverse_constant_branch_scalar_hand_values():
    e = TDiffusion(build_noise_schedule(2, 0.1, 0.2), ResolutionSchedule(2, (1, 1)))
    # t=2: gamma_hat_1 = 0.9, gamma_hat_2 = 0.72, beta_2 = 0.2, gamma_2 = 0.8
    c0 = math.sqrt(0.9) * 0.2 / (1 - 0.72)
    ct = math.sqrt(0.8) * (1 - 0.9) / (1 - 0.72)
    hand_mean = c0 * 1.0 + ct * 0.5
    y = torch.full((1, 1, 1, 1), 0.5, dtype=D)
    out = e.reverse_step(DiffusionState(2, y), torch.ones_like(y), torch.zeros_like(y))
    assert out.item() == pytest.approx(hand_mean, abs=1e-12)
    assert e.posterior_coefficients(2)[2] == pytest.approx((1 - 0.9) / (1 - 0.72) * 0.2, abs=1e-15)


def test_final_step_is_noiseless_and_returns_estimate():
    e = TDiffusion(build_noise_schedule(3, 0.1, 0.2), ResolutionSchedule(3, (2, 2)))
    y = torch.randn(1, 3, 2, 2, dtype=D)
    x0 = torch.randn(1, 3, 2, 2, dtype=D)
    out = e.reverse_step(DiffusionState(1, y), x0, None)
    np.testing.assert_allclose(out.numpy(), x0.numpy(), atol=1e-12)


def test_increase_branch_deterministic_limit():
    e = engine()  # r(3) = 4x4 < r(2) = 8x8
    y = torch.randn(1, 3, 4, 4, dtype=D)
    out = e.reverse_step(DiffusionState(3, y), None, torch.zeros(1, 3, 8, 8, dtype=D))
    expected = math.sqrt(e.noise.gamma_hat(2)) * upsample(y, (8, 8))
    assert out.shape[-2:] == (8, 8)
    assert torch.allclose(out, expected, rtol=0, atol=1e-14)


def test_increase_branch_noise_variants():
    y = torch.zeros(1, 1, 4, 4, dtype=D)
    noise = torch.ones(1, 1, 8, 8, dtype=D)
    cur = engine().reverse_step(DiffusionState(3, y), None, noise)
    prev = engine(increase_variance="previous").reverse_step(DiffusionState(3, y), None, noise)
    e = engine()
    assert cur[0, 0, 0, 0].item() == pytest.approx(math.sqrt(1 - e.noise.gamma_hat(3)))
    assert prev[0, 0, 0, 0].item() == pytest.approx(math.sqrt(1 - e.noise.gamma_hat(2)))


def test_increase_branch_needs_large_noise():
    e = engine()
    with pytest.raises(ValueError):
        e.reverse_step(DiffusionState(3, torch.zeros(1, 3, 4, 4)), None, torch.zeros(1, 3, 4, 4))


def test_reverse_rejects_t_zero_and_mismatch():
    e = engine()
    with pytest.raises(ValueError):
        e.reverse_step(DiffusionState(0, torch.zeros(1, 3, 8, 8)), torch.zeros(1, 3, 8, 8), None)
    with pytest.raises(ValueError):
        e.reverse_step(DiffusionState(5, torch.zeros(1, 3, 8, 8)), torch.zeros(1, 3, 8, 8), None)


def test_continuity_small_beta():
    # with beta_t -> 0 and a consistent estimate the posterior mean returns y_t
    e = TDiffusion(build_noise_schedule(2, 0.3, 0.3 + 1e-6), ResolutionSchedule(2, (1, 1)))
    e = TDiffusion(
        type(e.noise)(np.array([0.3, 1e-6])), ResolutionSchedule(2, (1, 1))
    )
    y = torch.full((1, 1, 1, 1), 0.4, dtype=D)
    estimate = y / math.sqrt(e.noise.gamma_hat(2))
    c0, ct, _ = e.posterior_coefficients(2)
    assert (c0 * estimate + ct * y).item() == pytest.approx(0.4, abs=1e-6)


def _tiny_models(seed=0):
    torch.manual_seed(seed)
    net = DenoiserNetwork(NetworkConfig(base_channels=4, channel_multipliers=(1, 2), num_blocks=1)).double()
    return net.eval()


def test_full_reverse_pass_equals_reference_ddpm_bitwise():
    net = _tiny_models()
    noise_sched = build_noise_schedule(6, 0.05, 0.3)
    e = TDiffusion(noise_sched, ResolutionSchedule(6, (8, 8)))
    ref = ReferenceDDPM(noise_sched.betas)
    cond = torch.rand(1, 3, 8, 8, dtype=D, generator=torch.Generator().manual_seed(1))
    out = e.sample(cond, net, None, NoiseSource(11), clip_estimate=False)

    stream = NoiseSource(11)
    c = cond * 2 - 1
    x = stream.draw((1, 3, 8, 8), dtype=D)
    with torch.no_grad():
        for t in range(6, 0, -1):
            x0 = net(x, c, t)
            eps = stream.draw((1, 3, 8, 8), dtype=D) if t > 1 else None
            x = ref.p_step(x, x0, t, eps)
    expected = ((x + 1) / 2).clamp(0, 1)
    assert torch.equal(out[None] if out.dim() == 3 else out, expected)


def test_sample_zero_network_smoke_and_determinism():
    net = DenoiserNetwork(NetworkConfig(base_channels=4, zero_init_output=True)).eval()
    cb = ChromaBalancer()
    e = engine(T=8, base=(32, 32), beta=(1e-3, 0.2))
    cond = torch.rand(3, 32, 32)
    a = e.sample(cond, net, cb, NoiseSource(5))
    b = e.sample(cond, net, cb, NoiseSource(5))
    assert a.shape == (3, 32, 32)
    assert torch.isfinite(a).all()
    assert torch.equal(a, b)
    # estimate is identically zero, so the last step lands on mid-grey
    assert torch.allclose(a, torch.full_like(a, 0.5))


def test_sample_reports_nonfinite_step():
    class Bad(torch.nn.Module):
        def forward(self, y, c, t):
            return torch.full_like(y, float("nan"))

    e = engine(T=8, base=(16, 16))
    with pytest.raises(FloatingPointError, match="t=8"):
        e.sample(torch.rand(3, 16, 16), Bad(), None, NoiseSource(0), clip_estimate=False)


def test_sample_intermediate_resolutions():
    seen = []

    class Spy(torch.nn.Module):
        def forward(self, y, c, t):
            seen.append((t, tuple(y.shape[-2:]), tuple(c.shape[-2:])))
            return torch.zeros_like(y)

    e = engine(T=8, base=(16, 16))
    e.sample(torch.rand(3, 16, 16), Spy(), None, NoiseSource(0))
    for t, ys, cs in seen:
        assert ys == cs == e.r(t)
    # the two resolution-increase steps skip the network
    assert sorted(t for t, _, _ in seen) == [1, 2, 4, 6, 7, 8]


def test_subsample_keeps_white_noise_white():
    x = torch.randn(4000, 1, 8, 8, dtype=D, generator=torch.Generator().manual_seed(0))
    s = subsample(x, (2, 2))
    assert s.shape[-2:] == (2, 2)
    assert s.var().item() == pytest.approx(1.0, rel=0.05)
