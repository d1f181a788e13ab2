"""The PLGF network and a minimal conv/pixel-shuffle baseline."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .context import ContextEmbedding
from .errors import ConfigurationError, RejectedInputError
from .layers import (
    ContextGatedAttention,
    DensityRecovery,
    EnhancedFPN,
    FiLM,
    PixelShuffleUp,
    ResidualDenseBlock,
)

ABLATIONS = frozenset({"no_film", "no_fusion", "no_cga"})
INPUT_TRANSFORMS = ("log1p", "identity")


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 128
    stages: int = 2
    rdb_layers: int = 4
    rdb_growth: int = 32
    fpn_scales: int = 4
    attn_heads: int = 4
    residual_scale_init: float = 0.1
    cond_dim: int = 128
    ablation: frozenset = field(default_factory=frozenset)
    input_channels: int = 1
    norm_groups: int = 8
    input_transform: str = "log1p"

    def __post_init__(self):
        object.__setattr__(self, "ablation", frozenset(self.ablation))
        for name in ("base_channels", "stages", "rdb_layers", "rdb_growth", "fpn_scales",
                     "attn_heads", "cond_dim", "input_channels", "norm_groups"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")
        unknown = self.ablation - ABLATIONS
        if unknown:
            raise ConfigurationError(f"unknown ablation switches {sorted(unknown)}; allowed {sorted(ABLATIONS)}")
        if self.input_transform not in INPUT_TRANSFORMS:
            raise ConfigurationError(f"input_transform must be one of {INPUT_TRANSFORMS}")
        if self.cond_dim % self.attn_heads:
            raise ConfigurationError(f"cond_dim={self.cond_dim} not divisible by attn_heads={self.attn_heads}")
        if "no_cga" not in self.ablation and self.base_channels % self.attn_heads:
            raise ConfigurationError(
                f"base_channels={self.base_channels} not divisible by attn_heads={self.attn_heads}"
            )

    @property
    def upscale_factor(self) -> int:
        return 2**self.stages

    def check_input(self, coarse_shape) -> None:
        """Raise if a coarse grid of ``coarse_shape`` (H, W) cannot pass through the stages."""
        h, w = coarse_shape
        if "no_fusion" in self.ablation:
            return
        if self.fpn_scales > math.log2(min(h, w)) + 1:
            raise ConfigurationError(f"fpn_scales={self.fpn_scales} too deep for a {h}x{w} coarse map")
        step = 2 ** (self.fpn_scales - 1)
        if h % step or w % step:
            raise ConfigurationError(f"coarse map {h}x{w} not divisible by {step} for fpn_scales={self.fpn_scales}")

    def with_ablation(self, *switches: str) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), "ablation": self.ablation | set(switches)})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablation"] = sorted(self.ablation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["ablation"] = frozenset(d.get("ablation", ()))
        return cls(**d)


class ProgressiveUpscalingBlock(nn.Module):
    """FiLM -> (RDB || EnhancedFPN, fused by 1x1) -> context-gated attention -> 2x pixel shuffle."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.base_channels
        self.film = None if "no_film" in cfg.ablation else FiLM(cfg.cond_dim, c)
        self.local = ResidualDenseBlock(c, cfg.rdb_growth, cfg.rdb_layers, cfg.residual_scale_init, cfg.norm_groups)
        if "no_fusion" in cfg.ablation:
            self.glob = None
            self.fuse = None
        else:
            self.glob = EnhancedFPN(c, cfg.fpn_scales)
            self.fuse = nn.Conv2d(2 * c, c, 1)
        self.cga = None if "no_cga" in cfg.ablation else ContextGatedAttention(cfg.cond_dim, c, cfg.attn_heads)
        self.up = PixelShuffleUp(c)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if self.film is not None:
            x = self.film(x, cond)
        h = self.local(x)
        if self.glob is not None:
            h = self.fuse(torch.cat([h, self.glob(x)], dim=1))
        if self.cga is not None:
            h = self.cga(h, cond)
        return self.up(h)


class PLGF(nn.Module):
    """Coarse map + external factors -> fine map that sums back to the coarse map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        c = cfg.base_channels
        self.context = ContextEmbedding(cfg.cond_dim, cfg.attn_heads)
        self.stem = nn.Conv2d(cfg.input_channels, c, 3, padding=1)
        self.stages = nn.ModuleList(ProgressiveUpscalingBlock(cfg) for _ in range(cfg.stages))
        self.head = DensityRecovery(c, cfg.input_channels, cfg.upscale_factor)

    def _check(self, coarse: torch.Tensor) -> None:
        if coarse.dim() != 4 or coarse.shape[1] != self.config.input_channels:
            raise RejectedInputError(
                f"coarse input must be [B, {self.config.input_channels}, H, W], got {tuple(coarse.shape)}"
            )
        self.config.check_input(tuple(coarse.shape[-2:]))

    def features(self, coarse, categorical, continuous) -> torch.Tensor:
        self._check(coarse)
        cond = self.context(categorical, continuous)
        x = torch.log1p(coarse) if self.config.input_transform == "log1p" else coarse
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x, cond)
        return x

    def forward(self, coarse, categorical, continuous) -> torch.Tensor:
        return self.head(self.features(coarse, categorical, continuous), coarse)


class SimpleSRNet(nn.Module):
    """Minimal context-free baseline: conv stem, conv + pixel-shuffle per 2x stage,
    the same block-normalized density head as PLGF."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        c = cfg.base_channels
        self.stem = nn.Sequential(nn.Conv2d(cfg.input_channels, c, 3, padding=1), nn.ReLU())
        self.body = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(), nn.Conv2d(c, c, 3, padding=1), nn.ReLU()
        )
        self.ups = nn.ModuleList(
            nn.Sequential(PixelShuffleUp(c), nn.ReLU()) for _ in range(cfg.stages)
        )
        self.head = DensityRecovery(c, cfg.input_channels, cfg.upscale_factor)

    def forward(self, coarse, categorical=None, continuous=None):
        x = torch.log1p(coarse) if self.config.input_transform == "log1p" else coarse
        x = self.stem(x)
        x = x + self.body(x)
        for up in self.ups:
            x = up(x)
        return self.head(x, coarse)


ARCHITECTURES = {"plgf": PLGF, "simple_srnet": SimpleSRNet}


def build_model(cfg: ModelConfig, architecture: str = "plgf") -> nn.Module:
    try:
        cls = ARCHITECTURES[architecture]
    except KeyError:
        raise ConfigurationError(f"unknown architecture {architecture!r}; choose from {sorted(ARCHITECTURES)}") from None
    return cls(cfg)


def count_parameters(cfg_or_model, architecture: str = "plgf") -> int:
    """Total trainable scalars of a model or of the model a config would build."""
    model = cfg_or_model if isinstance(cfg_or_model, nn.Module) else build_model(cfg_or_model, architecture)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def plgf_forward(coarse, factors, cfg: ModelConfig, model: PLGF):
    """Single-sample convenience wrapper: FlowMap-like array + ExternalFactors -> fine numpy map."""
    from .context import encode_factors
    from .flow import FlowMap

    arr = coarse.values if isinstance(coarse, FlowMap) else coarse
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(arr, dtype=dtype)[None, None]
    cat, cont = encode_factors([factors], dtype=dtype)
    if model.config != cfg:
        raise ConfigurationError("model was built from a different ModelConfig")
    with torch.no_grad():
        out = model(x, cat, cont)
    return out[0, 0].cpu().numpy()
