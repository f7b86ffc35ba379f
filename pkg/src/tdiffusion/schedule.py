"""Noise and resolution schedules for variable-resolution diffusion.

Step indices follow the diffusion convention: ``t = 0`` is the clean image
and ``t = T`` the most corrupted one. Arrays are stored 0-based, so
``betas[t - 1]`` is the variance added at step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
MAX_REDUCTIONS = 2


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances ``beta_t`` with ``gamma_t = 1 - beta_t`` and the
    cumulative products ``gamma_hat_t``."""

    betas: np.ndarray
    gammas: np.ndarray = field(init=False, repr=False)
    gamma_hats: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64).reshape(-1)
        if betas.size == 0:
            raise ScheduleError("noise schedule needs at least one step")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ScheduleError("every beta must lie strictly inside (0, 1)")
        betas.setflags(write=False)
        gammas = 1.0 - betas
        gammas.setflags(write=False)
        gamma_hats = np.cumprod(gammas)
        gamma_hats.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "gammas", gammas)
        object.__setattr__(self, "gamma_hats", gamma_hats)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def _check(self, t: int, lo: int) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ScheduleError(f"step {t} outside [{lo}, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check(t, 1) - 1])

    def gamma(self, t: int) -> float:
        return float(self.gammas[self._check(t, 1) - 1])

    def gamma_hat(self, t: int) -> float:
        t = self._check(t, 0)
        return 1.0 if t == 0 else float(self.gamma_hats[t - 1])

    def to_dict(self) -> dict:
        return {"betas": [float(b) for b in self.betas]}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        return cls(np.asarray(data["betas"], dtype=np.float64))


def build_noise_schedule(
    T: int,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def gamma_hat_at(schedule: NoiseSchedule, t: int) -> float:
    return schedule.gamma_hat(t)


@dataclass(frozen=True)
class ResolutionSchedule:
    """Maps a step index to the spatial size of ``y_t``.

    Every entry ``b`` of ``boundaries`` halves height and width for all
    ``t > b``. An empty boundary list gives a constant-resolution schedule.
    """

    T: int
    base_resolution: tuple[int, int]
    boundaries: tuple[int, ...] = ()

    def __post_init__(self):
        base = tuple(int(v) for v in self.base_resolution)
        bounds = tuple(int(b) for b in self.boundaries)
        object.__setattr__(self, "base_resolution", base)
        object.__setattr__(self, "boundaries", bounds)
        if self.T < 1:
            raise ScheduleError(f"T must be positive, got {self.T}")
        if len(base) != 2 or min(base) < 1:
            raise ScheduleError(f"bad base resolution {base}")
        if len(bounds) > MAX_REDUCTIONS:
            raise ScheduleError(f"at most {MAX_REDUCTIONS} reductions, got {len(bounds)}")
        if list(bounds) != sorted(set(bounds)):
            raise ScheduleError(f"boundaries must be strictly increasing: {bounds}")
        if bounds and not (1 <= bounds[0] and bounds[-1] < self.T):
            raise ScheduleError(f"boundaries must lie in [1, {self.T - 1}]: {bounds}")
        factor = 2 ** len(bounds)
        if base[0] % factor or base[1] % factor:
            raise ScheduleError(
                f"base resolution {base} must be divisible by {factor} "
                f"for {len(bounds)} halvings"
            )

    def level(self, t: int) -> int:
        """Number of halvings applied at step ``t``."""
        t = int(t)
        if not 0 <= t <= self.T:
            raise ScheduleError(f"step {t} outside [0, {self.T}]")
        return sum(1 for b in self.boundaries if t > b)

    def resolution(self, t: int) -> tuple[int, int]:
        k = 2 ** self.level(t)
        return (self.base_resolution[0] // k, self.base_resolution[1] // k)

    __call__ = resolution

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "base_resolution": list(self.base_resolution),
            "boundaries": list(self.boundaries),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ResolutionSchedule":
        return cls(
            int(data["T"]),
            tuple(data["base_resolution"]),
            tuple(data["boundaries"]),
        )


def build_resolution_schedule(
    T: int,
    base_resolution: Sequence[int],
    boundaries: Sequence[int] | None = None,
) -> ResolutionSchedule:
    """Two halvings placed after the first and second quarter of the timeline.

    ``boundaries`` overrides the default ``(T/4, T/2)`` placement; pass an
    empty sequence for a constant-resolution schedule.
    """
    h, w = (int(v) for v in base_resolution)
    if boundaries is None:
        if T % 4:
            raise ScheduleError(f"T={T} must be divisible by 4")
        if h % 4 or w % 4:
            raise ScheduleError(f"base resolution {(h, w)} must be divisible by 4")
        boundaries = (T // 4, T // 2)
    return ResolutionSchedule(int(T), (h, w), tuple(boundaries))
