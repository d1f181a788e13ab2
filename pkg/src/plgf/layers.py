"""Building blocks of a progressive upscaling stage."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, RejectedInputError


def eca_kernel_size(channels: int, gamma: int = 2, b: int = 1) -> int:
    """Adaptive odd 1-D kernel size for ECA, never below 3."""
    t = int(abs((math.log2(channels) + b) / gamma))
    k = t if t % 2 else t + 1
    return max(k, 3)


def group_count(channels: int, preferred: int = 8) -> int:
    return math.gcd(preferred, channels)


class FiLM(nn.Module):
    """Per-channel ``(1 + gamma) * x + beta`` with gamma/beta projected from the condition."""

    def __init__(self, cond_dim: int, channels: int):
        super().__init__()
        self.channels = channels
        self.to_gamma = nn.Linear(cond_dim, channels)
        self.to_beta = nn.Linear(cond_dim, channels)
        for lin in (self.to_gamma, self.to_beta):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ConfigurationError(f"FiLM built for {self.channels} channels, got {x.shape[1]}")
        gamma = self.to_gamma(cond)[:, :, None, None]
        beta = self.to_beta(cond)[:, :, None, None]
        return (1 + gamma) * x + beta


class ECA(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        k = eca_kernel_size(channels)
        self.conv = nn.Conv1d(1, 1, kernel_size=k, padding=(k - 1) // 2, bias=False)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        y = x.mean(dim=(2, 3))  # [B, C]
        y = self.conv(y.unsqueeze(1)).squeeze(1)
        return torch.sigmoid(y)[:, :, None, None]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


class DenseLayer(nn.Module):
    def __init__(self, in_channels: int, growth: int, groups: int = 8):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, growth, 3, padding=1)
        self.norm = nn.GroupNorm(group_count(growth, groups), growth)
        self.act = nn.GELU()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ResidualDenseBlock(nn.Module):
    """Dense conv layers -> 1x1 fusion -> ECA, added back with learnable scale alpha."""

    def __init__(self, channels: int, growth: int = 32, layers: int = 4, alpha: float = 0.1, groups: int = 8):
        super().__init__()
        self.channels = channels
        self.layers = nn.ModuleList(DenseLayer(channels + i * growth, growth, groups) for i in range(layers))
        self.fusion = nn.Conv2d(channels + layers * growth, channels, 1)
        self.eca = ECA(channels)
        self.alpha = nn.Parameter(torch.tensor(float(alpha)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ConfigurationError(f"RDB built for {self.channels} channels, got {x.shape[1]}")
        feats = [x]
        for layer in self.layers:
            feats.append(layer(torch.cat(feats, dim=1)))
        return x + self.alpha * self.eca(self.fusion(torch.cat(feats, dim=1)))


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, padding_mode="replicate")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return x * torch.sigmoid(self.conv(pooled))


class DualAttention(nn.Module):
    """Channel gating (ECA) followed by a spatial sigmoid mask."""

    def __init__(self, channels: int):
        super().__init__()
        self.channel = ECA(channels)
        self.spatial = SpatialAttention()

    def forward(self, x):
        return self.spatial(self.channel(x))


class EnhancedFPN(nn.Module):
    """Average-pooled pyramid, top-down additive fusion, per-level dual attention,
    and a sigmoid-gated sum of all levels back at input resolution.

    Convolutions use replicate padding, so a spatially constant input stays
    spatially constant through every level.
    """

    def __init__(self, channels: int, scales: int = 4):
        super().__init__()
        if scales < 1:
            raise ConfigurationError("fpn_scales must be >= 1")
        self.scales = scales
        self.lateral = nn.ModuleList(nn.Conv2d(channels, channels, 1) for _ in range(scales))
        self.smooth = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="replicate") for _ in range(scales)
        )
        self.attention = nn.ModuleList(DualAttention(channels) for _ in range(scales))
        self.level_logits = nn.Parameter(torch.zeros(scales))

    def pyramid(self, x: torch.Tensor) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        step = 2 ** (self.scales - 1)
        if h % step or w % step:
            raise ConfigurationError(f"feature map {h}x{w} not divisible by {step} for {self.scales} FPN scales")
        return [x if i == 0 else F.adaptive_avg_pool2d(x, (h >> i, w >> i)) for i in range(self.scales)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        levels = self.pyramid(x)
        merged = [None] * self.scales
        top = None
        for i in reversed(range(self.scales)):
            lat = self.lateral[i](levels[i])
            top = lat if top is None else lat + F.interpolate(top, scale_factor=2, mode="nearest")
            merged[i] = top
        weights = torch.sigmoid(self.level_logits)
        out = 0
        for i in range(self.scales):
            refined = self.attention[i](self.smooth[i](merged[i]))
            if i:
                refined = F.interpolate(refined, scale_factor=2**i, mode="nearest")
            out = out + weights[i] * refined
        return out


class ContextGatedAttention(nn.Module):
    """The condition vector queries all spatial positions; the attended vector
    yields per-channel (gamma, beta) applied as ``gamma * h + beta``.

    The gamma projection starts at weight 0 / bias 1 and the beta projection
    at 0, so a fresh block is the identity.
    """

    def __init__(self, cond_dim: int, channels: int, heads: int = 4):
        super().__init__()
        if channels % heads:
            raise ConfigurationError(f"channels={channels} not divisible by attention heads={heads}")
        self.channels = channels
        self.query = nn.Linear(cond_dim, channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.to_gamma = nn.Linear(channels, channels)
        self.to_beta = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_gamma.weight)
        nn.init.ones_(self.to_gamma.bias)
        nn.init.zeros_(self.to_beta.weight)
        nn.init.zeros_(self.to_beta.bias)

    def aggregate(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        q = self.query(cond).unsqueeze(1)  # [B, 1, C]
        kv = h.flatten(2).transpose(1, 2)  # [B, HW, C]
        v_agg, _ = self.attn(q, kv, kv, need_weights=False)
        return v_agg.squeeze(1)

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        v_agg = self.aggregate(h, cond)
        gamma = self.to_gamma(v_agg)[:, :, None, None]
        beta = self.to_beta(v_agg)[:, :, None, None]
        return gamma * h + beta


class PixelShuffleUp(nn.Module):
    """3x3 conv to 4C channels, then channel-to-space rearrangement (2x)."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 4 * channels, 3, padding=1)

    def forward(self, x):
        return pixel_shuffle(self.conv(x))


def pixel_shuffle(x: torch.Tensor, r: int = 2) -> torch.Tensor:
    """``out[c, r*i+di, r*j+dj] = in[r*r*c + r*di + dj, i, j]``."""
    if x.shape[-3] % (r * r):
        raise ConfigurationError(f"{x.shape[-3]} channels not divisible by {r * r}")
    return F.pixel_shuffle(x, r)


def n2_normalize(density: torch.Tensor, n: int, eps: float = 1e-9) -> torch.Tensor:
    """Scale every n x n block to sum to one; blocks summing below ``eps`` become uniform."""
    *lead, h, w = density.shape
    if h % n or w % n:
        raise RejectedInputError(f"density map {h}x{w} not divisible into {n}x{n} blocks")
    blocks = density.reshape(*lead, h // n, n, w // n, n)
    sums = blocks.sum(dim=(-3, -1), keepdim=True)
    dead = sums < eps
    safe = torch.where(dead, torch.ones_like(sums), sums)
    normed = torch.where(dead, torch.full_like(blocks, 1.0 / (n * n)), blocks / safe)
    return normed.reshape(density.shape)


def upsample_coarse(coarse: torch.Tensor, n: int) -> torch.Tensor:
    return coarse.repeat_interleave(n, dim=-2).repeat_interleave(n, dim=-1)


class DensityRecovery(nn.Module):
    """conv -> ReLU -> block normalization, times the replicated coarse map.

    Each fine block therefore sums to its coarse parent for any weights.
    """

    def __init__(self, channels: int, out_channels: int, upscale: int):
        super().__init__()
        self.upscale = upscale
        self.conv = nn.Conv2d(channels, out_channels, 3, padding=1)

    def distribute(self, raw: torch.Tensor, coarse: torch.Tensor) -> torch.Tensor:
        return n2_normalize(raw, self.upscale) * upsample_coarse(coarse, self.upscale)

    def forward(self, features: torch.Tensor, coarse: torch.Tensor) -> torch.Tensor:
        n = self.upscale
        if features.shape[-2:] != (coarse.shape[-2] * n, coarse.shape[-1] * n):
            raise RejectedInputError(
                f"features {tuple(features.shape[-2:])} do not match coarse {tuple(coarse.shape[-2:])} x{n}"
            )
        return self.distribute(F.relu(self.conv(features)), coarse)
