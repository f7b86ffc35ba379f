"""Variable-resolution diffusion engine.

Forward process (per step)::

    y_t = sqrt(gamma_t) * down(y_{t-1}) + sqrt(beta_t) * noise

where ``down`` is stride-2 subsampling whenever the resolution schedule
halves between ``t-1`` and ``t``. Subsampled white noise is still white,
so the closed-form marginal

    y_t = sqrt(gamma_hat_t) * down(y_0) + sqrt(1 - gamma_hat_t) * noise

is exactly consistent with the chain. The reverse process has two branches:
at a step where resolution grows back, ``y_t`` is upsampled, rescaled by
``sqrt(gamma_hat_{t-1})`` and re-noised; otherwise the usual DDPM posterior
built from a clean-image estimate is used.

Inside this module images live in the model range [-1, 1]; ``sample``
converts from and to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .schedule import NoiseSchedule, ResolutionSchedule


class NoiseSource:
    """Seeded standard-normal draws.

    Identical seed, number of previous draws and shapes give identical
    arrays. ``state``/``set_state`` snapshot the stream for resumption.
    """

    def __init__(self, seed: int, device: str | torch.device = "cpu"):
        self.seed = int(seed)
        self.generator = torch.Generator(device=device)
        self.generator.manual_seed(self.seed)
        self.position = 0

    def draw(self, shape, dtype=torch.float32) -> torch.Tensor:
        self.position += 1
        return torch.randn(tuple(shape), generator=self.generator, dtype=dtype, device=self.generator.device)

    def randint(self, low: int, high: int, size) -> torch.Tensor:
        self.position += 1
        return torch.randint(low, high, tuple(size), generator=self.generator, device=self.generator.device)

    def state(self) -> dict:
        return {"seed": self.seed, "position": self.position, "generator": self.generator.get_state()}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.position = int(state["position"])
        self.generator.set_state(state["generator"])


def spatial(x: torch.Tensor) -> tuple[int, int]:
    return (int(x.shape[-2]), int(x.shape[-1]))


def _factor(src: tuple[int, int], dst: tuple[int, int]) -> int:
    fh, fw = src[0] // dst[0], src[1] // dst[1]
    if fh != fw or fh < 1 or src[0] != dst[0] * fh or src[1] != dst[1] * fw:
        raise ValueError(f"cannot rescale {src} to {dst} by an integer factor")
    return fh


def subsample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest (stride) downsampling to ``size``; identity when sizes match."""
    f = _factor(spatial(x), tuple(size))
    return x if f == 1 else x[..., ::f, ::f]


def upsample(x: torch.Tensor, size: tuple[int, int], mode: str = "bilinear") -> torch.Tensor:
    size = tuple(size)
    if spatial(x) == size:
        return x
    squeeze = x.dim() == 3
    x4 = x[None] if squeeze else x
    kwargs = {"align_corners": False} if mode in ("bilinear", "bicubic") else {}
    out = F.interpolate(x4, size=size, mode=mode, **kwargs)
    return out[0] if squeeze else out


def resize_condition(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Area-average resize used only for the conditioning image."""
    size = tuple(size)
    if spatial(x) == size:
        return x
    squeeze = x.dim() == 3
    x4 = x[None] if squeeze else x
    out = F.interpolate(x4, size=size, mode="area")
    return out[0] if squeeze else out


def _expect(x: torch.Tensor, size: tuple[int, int], what: str) -> None:
    if spatial(x) != tuple(size):
        raise ValueError(f"{what} has spatial size {spatial(x)}, expected {tuple(size)}")


@dataclass
class DiffusionState:
    t: int
    y_t: torch.Tensor


class TDiffusion:
    """Forward/reverse operators for a noise schedule plus resolution schedule.

    ``upsample_mode`` selects the interpolation used when resolution grows
    during sampling. ``increase_variance`` picks the noise variance injected
    at those steps: ``"current"`` uses ``1 - gamma_hat_t`` and
    ``"previous"`` uses ``1 - gamma_hat_{t-1}``.
    """

    def __init__(
        self,
        noise: NoiseSchedule,
        resolution: ResolutionSchedule,
        upsample_mode: str = "bilinear",
        increase_variance: str = "current",
    ):
        if noise.T != resolution.T:
            raise ValueError(f"noise schedule has T={noise.T}, resolution schedule T={resolution.T}")
        if increase_variance not in ("current", "previous"):
            raise ValueError(f"unknown increase_variance {increase_variance!r}")
        self.noise = noise
        self.resolution = resolution
        self.upsample_mode = upsample_mode
        self.increase_variance = increase_variance

    @property
    def T(self) -> int:
        return self.noise.T

    def r(self, t: int) -> tuple[int, int]:
        return self.resolution(t)

    def forward_step(self, y_prev: torch.Tensor, t: int, noise: torch.Tensor) -> torch.Tensor:
        if not 1 <= t <= self.T:
            raise ValueError(f"forward step {t} outside [1, {self.T}]")
        _expect(y_prev, self.r(t - 1), "y_prev")
        _expect(noise, self.r(t), "noise")
        mean = math.sqrt(self.noise.gamma(t)) * subsample(y_prev, self.r(t))
        return mean + math.sqrt(self.noise.beta(t)) * noise

    def forward_marginal(self, y0: torch.Tensor, t: int, noise: torch.Tensor) -> torch.Tensor:
        if not 0 <= t <= self.T:
            raise ValueError(f"step {t} outside [0, {self.T}]")
        _expect(y0, self.r(0), "y0")
        _expect(noise, self.r(t), "noise")
        gh = self.noise.gamma_hat(t)
        return math.sqrt(gh) * subsample(y0, self.r(t)) + math.sqrt(1.0 - gh) * noise

    def is_increase(self, t: int) -> bool:
        return self.resolution.level(t) > self.resolution.level(t - 1)

    def posterior_coefficients(self, t: int) -> tuple[float, float, float]:
        """``(clean coefficient, y_t coefficient, variance)`` of the DDPM posterior."""
        beta = self.noise.beta(t)
        gamma = self.noise.gamma(t)
        gh = self.noise.gamma_hat(t)
        gh_prev = self.noise.gamma_hat(t - 1)
        c_clean = math.sqrt(gh_prev) * beta / (1.0 - gh)
        c_t = math.sqrt(gamma) * (1.0 - gh_prev) / (1.0 - gh)
        var = (1.0 - gh_prev) / (1.0 - gh) * beta
        return c_clean, c_t, var

    def needs_noise(self, t: int) -> bool:
        return t > 1 or self.is_increase(t)

    def reverse_step(
        self,
        state: DiffusionState,
        y0_corrected: torch.Tensor | None,
        noise: torch.Tensor | None,
    ) -> torch.Tensor:
        """One reverse step from ``state.t`` to ``state.t - 1``.

        ``noise`` must be at resolution ``r(t-1)``; it is ignored (and may be
        None) at the final constant-resolution step ``t = 1``.
        """
        t, y_t = int(state.t), state.y_t
        if not 1 <= t <= self.T:
            raise ValueError(f"reverse step {t} outside [1, {self.T}]")
        _expect(y_t, self.r(t), "y_t")
        prev = self.r(t - 1)
        if self.is_increase(t):
            if noise is None:
                raise ValueError(f"step {t} raises resolution and needs noise at {prev}")
            _expect(noise, prev, "noise")
            gh_noise = self.noise.gamma_hat(t if self.increase_variance == "current" else t - 1)
            up = upsample(y_t, prev, self.upsample_mode)
            return math.sqrt(self.noise.gamma_hat(t - 1)) * up + math.sqrt(1.0 - gh_noise) * noise

        if y0_corrected is None:
            raise ValueError(f"step {t} needs a clean-image estimate")
        _expect(y0_corrected, self.r(t), "y0_corrected")
        c_clean, c_t, var = self.posterior_coefficients(t)
        mean = c_clean * y0_corrected + c_t * y_t
        if t == 1:
            return mean
        if noise is None:
            raise ValueError(f"step {t} needs noise")
        _expect(noise, prev, "noise")
        return mean + math.sqrt(var) * noise

    @torch.no_grad()
    def sample(self, condition, net, cb, rng: NoiseSource, clip_estimate: bool = True) -> torch.Tensor:
        """Enhance ``condition`` (values in [0, 1]) and return a [0, 1] image.

        Noise is drawn from ``rng`` in a fixed order: ``y_T`` first, then one
        array per step that needs it (see ``needs_noise``), from ``t = T``
        down to 1.
        """
        squeeze = condition.dim() == 3
        cond = (condition[None] if squeeze else condition) * 2.0 - 1.0
        _expect(cond, self.r(0), "condition")
        b, c = cond.shape[:2]
        dtype = cond.dtype
        y = rng.draw((b, c, *self.r(self.T)), dtype=dtype).to(cond.device)
        for t in range(self.T, 0, -1):
            y0 = None
            if not self.is_increase(t):
                y0 = net(y, resize_condition(cond, self.r(t)), t)
                if cb is not None:
                    y0 = cb(y0, t)
                if clip_estimate:
                    y0 = y0.clamp(-1.0, 1.0)
            noise = None
            if self.needs_noise(t):
                noise = rng.draw((b, c, *self.r(t - 1)), dtype=dtype).to(cond.device)
            y = self.reverse_step(DiffusionState(t, y), y0, noise)
            if not torch.isfinite(y).all():
                raise FloatingPointError(f"non-finite values produced at reverse step t={t}")
        out = ((y + 1.0) / 2.0).clamp(0.0, 1.0)
        return out[0] if squeeze else out
