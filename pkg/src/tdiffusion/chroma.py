"""Chroma balancer: a time-conditioned channel-attention corrector.

Applied to every clean-image estimate before it is used, it rescales each
colour channel by a learned gate and adds a per-channel offset:

    out = x * (2 * sigmoid(z)) + c

The heads producing ``z`` and ``c`` are zero-initialised, which makes the
module an exact identity at construction (``2 * sigmoid(0) == 1``).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import sinusoidal_embedding


class ChromaBalancer(nn.Module):
    def __init__(self, channels: int = 3, width: int = 32, reduction_ratio: int = 4, time_dim: int = 32):
        super().__init__()
        if reduction_ratio < 1 or width // reduction_ratio < 1:
            raise ValueError(f"reduction_ratio {reduction_ratio} too large for width {width}")
        hidden = width // reduction_ratio
        self.channels = channels
        self.width = width
        self.reduction_ratio = reduction_ratio
        self.time_dim = time_dim
        self.lift = nn.Linear(channels, width)
        self.time_proj = nn.Sequential(nn.Linear(time_dim, width), nn.SiLU(), nn.Linear(width, width))
        self.reduce = nn.Linear(width, hidden)
        self.gate_head = nn.Linear(hidden, channels)
        self.correction_head = nn.Linear(hidden, channels)
        for head in (self.gate_head, self.correction_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def config_dict(self) -> dict:
        return {
            "width": self.width,
            "reduction_ratio": self.reduction_ratio,
            "time_dim": self.time_dim,
        }

    def attention(self, x: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(gate, correction)``, each ``(B, C)``; ``gate`` is in (0, 1)."""
        t = torch.as_tensor(t, device=x.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x.shape[0])
        temb = sinusoidal_embedding(t, self.time_dim).to(x.dtype)
        h = self.lift(x.mean(dim=(2, 3))) + self.time_proj(temb)
        h = F.silu(self.reduce(F.silu(h)))
        return torch.sigmoid(self.gate_head(h)), self.correction_head(h)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x[None]
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ValueError(f"chroma balancer expects {self.channels} channels, got {tuple(x.shape)}")
        gate, correction = self.attention(x, t)
        out = x * (2.0 * gate)[:, :, None, None] + correction[:, :, None, None]
        return out[0] if squeeze else out


def cb_forward(cb: ChromaBalancer, y0_est: torch.Tensor, t) -> torch.Tensor:
    return cb(y0_est, t)
