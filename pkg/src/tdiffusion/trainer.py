"""Joint training of the denoiser and chroma balancer under SmoothL1."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import torch
from .backbone import DenoiserNetwork
from .checkpoint import load_checkpoint, save_checkpoint
from .chroma import ChromaBalancer
from .config import RunConfig
from .schedule import NoiseSchedule, ResolutionSchedule
from .tdiff import NoiseSource, TDiffusion, resize_condition, subsample

log = logging.getLogger(__name__)

METRICS_NAME = "metrics.txt"


def smooth_l1(target: torch.Tensor, prediction: torch.Tensor, epsilon: float = 1.0) -> torch.Tensor:
    """Mean SmoothL1: ``0.5 d^2 / eps`` where ``|d| < eps``, else ``|d| - 0.5 eps``."""
    if target.shape != prediction.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(prediction.shape)}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    d = target - prediction
    ad = d.abs()
    return torch.where(ad < epsilon, 0.5 * d * d / epsilon, ad - 0.5 * epsilon).mean()


@dataclass
class PairDataset:
    """In-memory paired images, values in [0, 1], shape (N, 3, H, W)."""

    low: torch.Tensor
    normal: torch.Tensor
    names: list[str]

    def __post_init__(self):
        if self.low.shape != self.normal.shape:
            raise ValueError("low and normal stacks differ in shape")
        if len(self.names) != self.low.shape[0]:
            raise ValueError("names do not match the number of images")

    def __len__(self):
        return len(self.names)

    @property
    def resolution(self) -> tuple[int, int]:
        return (int(self.low.shape[-2]), int(self.low.shape[-1]))


@dataclass
class Models:
    denoiser: DenoiserNetwork
    chroma: ChromaBalancer | None
    diffusion: TDiffusion

    def parameters(self):
        yield from self.denoiser.parameters()
        if self.chroma is not None:
            yield from self.chroma.parameters()

    def train(self, mode: bool = True):
        self.denoiser.train(mode)
        if self.chroma is not None:
            self.chroma.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state(self) -> dict:
        return {
            "denoiser": self.denoiser.state_dict(),
            "chroma": None if self.chroma is None else self.chroma.state_dict(),
        }

    def load_state(self, state: dict) -> None:
        self.denoiser.load_state_dict(state["denoiser"])
        if self.chroma is not None:
            if state.get("chroma") is None:
                raise ValueError("checkpoint has no chroma balancer parameters")
            self.chroma.load_state_dict(state["chroma"])

    def enhance(self, condition: torch.Tensor, rng: NoiseSource) -> torch.Tensor:
        return self.diffusion.sample(condition, self.denoiser, self.chroma, rng)


def build_models(config: RunConfig, base_resolution=None, seed: int | None = None) -> Models:
    """Construct networks (deterministically initialised from the seed) and schedules."""
    noise, resolution = config.schedule.build(base_resolution)
    torch.manual_seed(config.seed if seed is None else seed)
    denoiser = DenoiserNetwork(config.network)
    chroma = None
    if config.chroma.enabled:
        c = config.chroma
        chroma = ChromaBalancer(width=c.width, reduction_ratio=c.reduction_ratio, time_dim=c.time_dim)
    d = config.network.divisor
    for t in (0, noise.T):
        h, w = resolution(t)
        if h % d or w % d:
            raise ValueError(
                f"resolution {(h, w)} at step {t} is not divisible by the network's {d}"
            )
    diffusion = TDiffusion(
        noise,
        resolution,
        upsample_mode=config.schedule.upsample_mode,
        increase_variance=config.schedule.increase_variance,
    )
    return Models(denoiser, chroma, diffusion)


def train_step(
    models: Models,
    optimizer: torch.optim.Optimizer,
    low: torch.Tensor,
    normal: torch.Tensor,
    rng: NoiseSource,
    epsilon: float = 1.0,
    t: int | None = None,
    sample_ids=None,
) -> float:
    """One optimisation step on a batch of pairs (values in [0, 1]).

    Each pair gets its own step index (uniform in [1, T] unless ``t`` is
    forced). Pairs sharing a resolution are pushed through the network
    together; the loss is the mean over pairs of the per-pair mean SmoothL1.
    """
    if low.shape[0] == 0:
        raise ValueError("empty batch")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    diffusion = models.diffusion
    b = low.shape[0]
    y0 = normal * 2.0 - 1.0
    cond = low * 2.0 - 1.0
    if t is None:
        ts = rng.randint(1, diffusion.T + 1, (b,))
    else:
        ts = torch.full((b,), int(t), dtype=torch.long)
    gamma_hats = torch.tensor(diffusion.noise.gamma_hats, dtype=y0.dtype)
    levels = torch.tensor([diffusion.resolution.level(int(s)) for s in ts])

    optimizer.zero_grad(set_to_none=True)
    total = y0.new_zeros(())
    for level in sorted(set(levels.tolist())):
        idx = torch.nonzero(levels == level).flatten()
        tt = ts[idx]
        size = diffusion.r(int(tt[0]))
        noise = rng.draw((len(idx), y0.shape[1], *size), dtype=y0.dtype)
        gh = gamma_hats[tt - 1].reshape(-1, 1, 1, 1)
        target = subsample(y0[idx], size)
        y_t = gh.sqrt() * target + (1.0 - gh).sqrt() * noise
        pred = models.denoiser(y_t, resize_condition(cond[idx], size), tt)
        if models.chroma is not None:
            pred = models.chroma(pred, tt)
        for k in range(len(idx)):
            total = total + smooth_l1(target[k], pred[k], epsilon)
    loss = total / b
    if not torch.isfinite(loss):
        ids = list(range(b)) if sample_ids is None else list(sample_ids)
        raise FloatingPointError(
            f"non-finite loss {loss.item()} at steps {ts.tolist()} for samples {ids}"
        )
    loss.backward()
    optimizer.step()
    return float(loss.detach())


class EMA:
    def __init__(self, models: Models, decay: float):
        self.decay = decay
        self.shadow = copy.deepcopy(models.state())

    @torch.no_grad()
    def update(self, models: Models):
        current = models.state()
        for name, sd in current.items():
            if sd is None:
                continue
            for key, value in sd.items():
                if value.dtype.is_floating_point:
                    self.shadow[name][key].mul_(self.decay).add_(value, alpha=1 - self.decay)
                else:
                    self.shadow[name][key].copy_(value)


def make_optimizer(models: Models, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(models.parameters(), lr=lr)


def checkpoint_payload(config, models, optimizer, rng, iteration, ema=None) -> dict:
    return {
        "iteration": iteration,
        "seed": config.seed,
        "models": models.state(),
        "ema": None if ema is None else ema.shadow,
        "optimizer": optimizer.state_dict(),
        "schedules": {
            "noise": models.diffusion.noise.to_dict(),
            "resolution": models.diffusion.resolution.to_dict(),
        },
        "config": config.to_dict(),
        "rng": rng.state(),
    }


def models_from_checkpoint(payload: dict, use_ema: bool = True) -> tuple[RunConfig, Models]:
    config = RunConfig.from_dict(payload["config"])
    res = ResolutionSchedule.from_dict(payload["schedules"]["resolution"])
    models = build_models(config, res.base_resolution)
    models.diffusion = TDiffusion(
        NoiseSchedule.from_dict(payload["schedules"]["noise"]),
        res,
        upsample_mode=config.schedule.upsample_mode,
        increase_variance=config.schedule.increase_variance,
    )
    state = payload["ema"] if use_ema and payload.get("ema") else payload["models"]
    models.load_state(state)
    models.eval()
    return config, models


def _trim_metrics(path: Path, last_iter: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and int(ln.split()[0]) <= last_iter]
    path.write_text("".join(ln + "\n" for ln in keep))


def fit(
    config: RunConfig,
    dataset: PairDataset,
    out_dir: str | Path,
    resume: str | Path | None = None,
    iterations: int | None = None,
) -> Path:
    """Train for ``config.train.iterations`` total iterations.

    Checkpoints go to ``out_dir/checkpoint.pt`` every
    ``checkpoint_interval`` iterations and at the end; per-iteration losses
    are appended to ``out_dir/metrics.txt`` as ``iter loss wallclock_ms``.
    ``iterations`` stops early at that iteration (used to simulate an
    interrupted run).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    config = copy.deepcopy(config)
    config.schedule.base_resolution = dataset.resolution
    tc = config.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.pt"
    metrics_path = out_dir / METRICS_NAME

    models = build_models(config, dataset.resolution)
    optimizer = make_optimizer(models, tc.learning_rate)
    rng = NoiseSource(config.seed)
    ema = EMA(models, tc.ema_decay) if tc.ema_decay > 0 else None
    start = 0
    if resume is not None:
        payload = load_checkpoint(resume)
        models.load_state(payload["models"])
        optimizer.load_state_dict(payload["optimizer"])
        rng.set_state(payload["rng"])
        if ema is not None and payload.get("ema"):
            ema.shadow = payload["ema"]
        start = int(payload["iteration"])
        _trim_metrics(metrics_path, start)
        log.info("resumed from %s at iteration %d", resume, start)
    else:
        metrics_path.write_text("")

    stop = tc.iterations if iterations is None else min(iterations, tc.iterations)
    models.train()
    n = len(dataset)
    with open(metrics_path, "a") as metrics:
        for it in range(start + 1, stop + 1):
            t0 = time.perf_counter()
            idx = rng.randint(0, n, (tc.batch_size,))
            loss = train_step(
                models,
                optimizer,
                dataset.low[idx],
                dataset.normal[idx],
                rng,
                tc.epsilon,
                sample_ids=[dataset.names[i] for i in idx],
            )
            if ema is not None:
                ema.update(models)
            ms = (time.perf_counter() - t0) * 1e3
            metrics.write(f"{it} {loss:.8f} {ms:.3f}\n")
            if it % tc.checkpoint_interval == 0 or it == stop:
                metrics.flush()
                try:
                    save_checkpoint(ckpt_path, checkpoint_payload(config, models, optimizer, rng, it, ema))
                except OSError:
                    metrics.flush()
                    raise
            if it % 100 == 0:
                log.info("iter %d loss %.5f", it, loss)
    return ckpt_path
