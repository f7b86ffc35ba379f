"""Run configuration: TOML file with sections, plus ``section.key=value`` overrides."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backbone import NetworkConfig
from .schedule import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    NoiseSchedule,
    ResolutionSchedule,
    build_noise_schedule,
    build_resolution_schedule,
)


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    base_resolution: tuple[int, int] = (256, 256)
    # None places halvings at T/4 and T/2; [] disables them
    boundaries: list[int] | None = None
    upsample_mode: str = "bilinear"
    increase_variance: str = "current"

    def __post_init__(self):
        self.base_resolution = tuple(int(v) for v in self.base_resolution)
        if self.boundaries is not None:
            self.boundaries = [int(b) for b in self.boundaries]

    def build(self, base_resolution=None) -> tuple[NoiseSchedule, ResolutionSchedule]:
        base = tuple(base_resolution or self.base_resolution)
        return (
            build_noise_schedule(self.T, self.beta_start, self.beta_end),
            build_resolution_schedule(self.T, base, self.boundaries),
        )


@dataclass
class ChromaConfig:
    enabled: bool = True
    width: int = 32
    reduction_ratio: int = 4
    time_dim: int = 32


@dataclass
class DegradeConfig:
    gamma_range: tuple[float, float] = (1.5, 5.0)
    illum_range: tuple[float, float] = (0.3, 0.8)

    def __post_init__(self):
        self.gamma_range = tuple(float(v) for v in self.gamma_range)
        self.illum_range = tuple(float(v) for v in self.illum_range)


@dataclass
class TrainConfig:
    iterations: int = 10000
    batch_size: int = 4
    learning_rate: float = 1e-4
    checkpoint_interval: int = 1000
    epsilon: float = 1.0
    # 0 disables the weight EMA
    ema_decay: float = 0.0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.checkpoint_interval < 1:
            raise ConfigError("iterations, batch_size and checkpoint_interval must be positive")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")


@dataclass
class EvalConfig:
    heatmap_scale: float = 0.5
    bench_warmup: int = 2
    bench_timed: int = 30


SECTIONS = {
    "schedule": ScheduleConfig,
    "network": NetworkConfig,
    "chroma": ChromaConfig,
    "degrade": DegradeConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    chroma: ChromaConfig = field(default_factory=ChromaConfig)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        out = asdict(self)
        for section in out.values():
            if isinstance(section, dict):
                for key, value in section.items():
                    if isinstance(value, tuple):
                        section[key] = list(value)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = sorted(set(data) - set(SECTIONS) - {"seed"})
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs: dict[str, Any] = {}
        if "seed" in data:
            kwargs["seed"] = int(data["seed"])
        for name, section_cls in SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section [{name}] must be a table")
            known = {f.name for f in fields(section_cls)}
            bad = sorted(set(section) - known)
            if bad:
                raise ConfigError(
                    "unknown config key(s): " + ", ".join(f"{name}.{k}" for k in bad)
                )
            try:
                kwargs[name] = section_cls(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        return cls(**kwargs)


def parse_override(text: str) -> tuple[list[str], Any]:
    """Parse ``section.key=value``; the value uses TOML literal syntax,
    falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.strip().split("."), value


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    for item in overrides:
        keys, value = parse_override(item)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-table")
        node[keys[-1]] = value
    return RunConfig.from_dict(data)
