"""Conditional U-Net denoiser built from Temporal Light Blocks.

A Temporal Light Block (TLB) is a plain residual block followed by a
Temporal Light Unit (TLU). The TLU is the only place the step index enters
the network:

    TLU(F, t) = contract(act(expand(norm(F + e(t))))) + F

``expand``/``contract`` are 1x1 convolutions by default, so the unit is
cheap compared with the self-attention blocks of a vanilla DDPM U-Net. The
vanilla variant (``block="attention"``) is kept only as a reference point
for parameter counts and throughput.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class NetworkConfig:
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    num_blocks: int = 3
    tlu_hidden_ratio: int = 2
    tlu_kernel_size: int = 1
    in_channels: int = 6
    out_channels: int = 3
    # "tlb" for the light network, "attention" for the vanilla baseline
    block: str = "tlb"
    tlu_time_embedding: bool = True
    zero_init_output: bool = False

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        if self.num_levels < 2:
            raise ValueError("a U-Net needs at least two levels")
        if self.base_channels < 1 or min(self.channel_multipliers) < 1:
            raise ValueError("channel counts must be positive")
        if self.num_blocks < 1 or self.tlu_hidden_ratio < 1:
            raise ValueError("num_blocks and tlu_hidden_ratio must be positive")
        if self.tlu_kernel_size % 2 != 1:
            raise ValueError("tlu_kernel_size must be odd to preserve spatial size")
        if self.in_channels != 2 * self.out_channels:
            raise ValueError("conditioning by concatenation needs in_channels = 2 * out_channels")
        if self.block not in ("tlb", "attention"):
            raise ValueError(f"unknown block type {self.block!r}")

    @property
    def num_levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def divisor(self) -> int:
        """Spatial sizes must be multiples of this."""
        return 2 ** (self.num_levels - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def light_config(**overrides) -> NetworkConfig:
    return NetworkConfig(**overrides)


def vanilla_config(**overrides) -> NetworkConfig:
    """Vanilla-DDPM-scale reference: wider, deeper, self-attention blocks."""
    params = dict(
        base_channels=128,
        channel_multipliers=(1, 2, 2, 4, 4),
        num_blocks=2,
        block="attention",
    )
    params.update(overrides)
    return NetworkConfig(**params)


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half
    )
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeEmbedding(nn.Module):
    """Sinusoidal step encoding followed by a two-layer projection."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_embedding(t, self.dim).to(dtype))


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(32, channels), channels)


class ChannelLayerNorm(nn.Module):
    """Layer norm over the channel axis of an NCHW tensor, per pixel."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(1, keepdim=True)
        var = (x - mean).pow(2).mean(1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class TemporalLightUnit(nn.Module):
    def __init__(
        self,
        channels: int,
        temb_dim: int,
        hidden_ratio: int = 2,
        kernel_size: int = 1,
        use_time: bool = True,
    ):
        super().__init__()
        hidden = channels * hidden_ratio
        pad = kernel_size // 2
        self.channels = channels
        self.use_time = use_time
        self.time_proj = nn.Linear(temb_dim, channels) if use_time else None
        self.norm = ChannelLayerNorm(channels)
        self.expand = nn.Conv2d(channels, hidden, kernel_size, padding=pad)
        self.contract = nn.Conv2d(hidden, channels, kernel_size, padding=pad)
        # zero contraction: the unit starts as an exact identity
        nn.init.zeros_(self.contract.weight)
        nn.init.zeros_(self.contract.bias)

    def project_time(self, temb: torch.Tensor) -> torch.Tensor:
        if self.time_proj is None:
            return temb.new_zeros(temb.shape[0], self.channels)
        return self.time_proj(F.silu(temb))

    def inject(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        if t_emb.shape[-1] != x.shape[1]:
            raise ValueError(
                f"time embedding has {t_emb.shape[-1]} channels, features have {x.shape[1]}"
            )
        h = self.norm(x + t_emb.reshape(-1, x.shape[1], 1, 1))
        return self.contract(F.silu(self.expand(h))) + x

    def forward(self, x, temb):
        return self.inject(x, self.project_time(temb))


def tlu_forward(unit: TemporalLightUnit, features: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
    """Apply ``unit`` to ``features`` with an already-projected time vector.

    Accepts an unbatched ``(C, H, W)`` map with a ``(C,)`` embedding, or
    batched ``(B, C, H, W)`` with ``(B, C)``.
    """
    if features.dim() == 3:
        if t_emb.dim() != 1 or t_emb.shape[0] != features.shape[0]:
            raise ValueError(
                f"time embedding shape {tuple(t_emb.shape)} does not match "
                f"{features.shape[0]} feature channels"
            )
        return unit.inject(features[None], t_emb[None])[0]
    return unit.inject(features, t_emb)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int | None = None):
        super().__init__()
        self.norm1 = group_norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_proj is not None:
            h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = group_norm(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class TemporalLightBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, config: NetworkConfig):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch)
        self.tlu = TemporalLightUnit(
            out_ch,
            temb_dim,
            config.tlu_hidden_ratio,
            config.tlu_kernel_size,
            config.tlu_time_embedding,
        )

    def forward(self, x, temb):
        return self.tlu(self.res(x), temb)


class AttentionBlock(nn.Module):
    """Vanilla DDPM building block: time-conditioned ResBlock + self-attention."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, config: NetworkConfig):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, temb_dim)
        self.attn = SelfAttention(out_ch)

    def forward(self, x, temb):
        return self.attn(self.res(x, temb))


class DenoiserNetwork(nn.Module):
    """Predicts the clean image from ``(y_t, condition, t)``.

    Inputs are concatenated along channels, so ``y_t`` and ``condition``
    must share a shape whose spatial sizes are multiples of
    ``config.divisor``. The parameter count depends only on ``config``.
    """

    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = config = config or NetworkConfig()
        block_cls = TemporalLightBlock if config.block == "tlb" else AttentionBlock
        ch0 = config.base_channels
        temb_dim = 4 * ch0
        chans = [ch0 * m for m in config.channel_multipliers]

        self.time_embed = TimeEmbedding(ch0, temb_dim)
        self.in_conv = nn.Conv2d(config.in_channels, ch0, 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = ch0
        for i, ch in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(config.num_blocks):
                blocks.append(block_cls(prev, ch, temb_dim, config))
                prev = ch
            self.down.append(blocks)
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid = nn.ModuleList([block_cls(prev, prev, temb_dim, config) for _ in range(2)])

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(chans))):
            ch = chans[i]
            blocks = nn.ModuleList([block_cls(prev + ch, ch, temb_dim, config)])
            for _ in range(config.num_blocks - 1):
                blocks.append(block_cls(ch, ch, temb_dim, config))
            prev = ch
            self.up.append(blocks)
            if i > 0:
                self.upsample.append(nn.Conv2d(ch, chans[i - 1], 3, padding=1))
                prev = chans[i - 1]

        self.out_norm = group_norm(ch0)
        self.out_conv = nn.Conv2d(ch0, config.out_channels, 3, padding=1)
        if config.zero_init_output:
            nn.init.zeros_(self.out_conv.weight)
            nn.init.zeros_(self.out_conv.bias)

    def _check_inputs(self, y_t, condition):
        if y_t.shape != condition.shape:
            raise ValueError(
                f"y_t {tuple(y_t.shape)} and condition {tuple(condition.shape)} differ in shape"
            )
        if y_t.dim() != 4 or y_t.shape[1] * 2 != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.out_channels}, H, W), got {tuple(y_t.shape)}")
        d = self.config.divisor
        if y_t.shape[-2] % d or y_t.shape[-1] % d:
            raise ValueError(f"spatial size {tuple(y_t.shape[-2:])} is not divisible by {d}")

    def forward(self, y_t: torch.Tensor, condition: torch.Tensor, t) -> torch.Tensor:
        squeeze = y_t.dim() == 3
        if squeeze:
            y_t, condition = y_t[None], condition[None]
        self._check_inputs(y_t, condition)
        t = torch.as_tensor(t, device=y_t.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(y_t.shape[0])
        temb = self.time_embed(t)

        h = self.in_conv(torch.cat([y_t, condition], dim=1))
        skips = []
        for i, blocks in enumerate(self.down):
            for block in blocks:
                h = block(h, temb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        for block in self.mid:
            h = block(h, temb)
        for j, blocks in enumerate(self.up):
            h = torch.cat([h, skips.pop()], dim=1)
            for block in blocks:
                h = block(h, temb)
            if j < len(self.upsample):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[j](h)
        out = self.out_conv(F.silu(self.out_norm(h)))
        return out[0] if squeeze else out


def denoise_forward(net: DenoiserNetwork, y_t, condition, t) -> torch.Tensor:
    return net(y_t, condition, t)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def millions(count: int) -> str:
    return f"{count / 1e6:.2f}"
