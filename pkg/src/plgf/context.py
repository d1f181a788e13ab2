"""External-factor records and the context embedding network."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import nn

from .errors import ConfigurationError, RejectedInputError

NUM_WEATHER = 16
NUM_DAYS = 7
NUM_HOURS = 24
TEMP_RANGE = (-24.6, 41.0)
WIND_RANGE = (0.0, 48.6)
NUM_CONTINUOUS = 4  # temperature, wind, holiday, weekend


@dataclass(frozen=True)
class ExternalFactors:
    weather_class: int
    temperature_c: float
    wind_mph: float
    day_of_week: int
    hour_of_day: int
    is_holiday: bool
    is_weekend: bool

    def __post_init__(self):
        for name, value, card in (
            ("weather_class", self.weather_class, NUM_WEATHER),
            ("day_of_week", self.day_of_week, NUM_DAYS),
            ("hour_of_day", self.hour_of_day, NUM_HOURS),
        ):
            if int(value) != value or not 0 <= value < card:
                raise RejectedInputError(f"{name}={value!r} outside [0, {card})")
        # continuous ranges are enforced by clamping, not rejection
        object.__setattr__(self, "temperature_c", min(max(float(self.temperature_c), TEMP_RANGE[0]), TEMP_RANGE[1]))
        object.__setattr__(self, "wind_mph", min(max(float(self.wind_mph), WIND_RANGE[0]), WIND_RANGE[1]))
        object.__setattr__(self, "is_holiday", bool(self.is_holiday))
        object.__setattr__(self, "is_weekend", bool(self.is_weekend))

    def to_dict(self) -> dict:
        return asdict(self)


def encode_factors(factors: Sequence[ExternalFactors], dtype=torch.float32):
    """Pack records into ``(categorical[B, 3], continuous[B, 4])`` tensors.

    Categorical columns are (day, hour, weather).  Continuous columns are raw
    temperature, raw wind, holiday and weekend; min-max scaling happens inside
    :class:`ContextEmbedding` so gradients w.r.t. raw values are available.
    """
    cat = torch.tensor([[f.day_of_week, f.hour_of_day, f.weather_class] for f in factors], dtype=torch.long)
    cont = torch.tensor(
        [[f.temperature_c, f.wind_mph, float(f.is_holiday), float(f.is_weekend)] for f in factors],
        dtype=dtype,
    )
    return cat, cont


def normalize_continuous(cont: torch.Tensor) -> torch.Tensor:
    lo = cont.new_tensor([TEMP_RANGE[0], WIND_RANGE[0], 0.0, 0.0])
    hi = cont.new_tensor([TEMP_RANGE[1], WIND_RANGE[1], 1.0, 1.0])
    return ((cont - lo) / (hi - lo)).clamp(0.0, 1.0)


class ContextEmbedding(nn.Module):
    """Day/hour/weather embeddings plus an MLP token for continuous factors,
    mixed by multi-head self-attention and projected to ``cond_dim``.

    The four tokens are always ordered (day, hour, weather, continuous); the
    attended tokens are concatenated before the final projection, so the order
    matters even though attention itself is permutation-equivariant.
    """

    def __init__(self, cond_dim: int = 128, heads: int = 4):
        super().__init__()
        if cond_dim % heads:
            raise ConfigurationError(f"cond_dim={cond_dim} not divisible by heads={heads}")
        self.cond_dim = cond_dim
        self.day = nn.Embedding(NUM_DAYS, cond_dim)
        self.hour = nn.Embedding(NUM_HOURS, cond_dim)
        self.weather = nn.Embedding(NUM_WEATHER, cond_dim)
        self.cont_mlp = nn.Sequential(
            nn.Linear(NUM_CONTINUOUS, cond_dim),
            nn.GELU(),
            nn.Linear(cond_dim, cond_dim),
        )
        self.attn = nn.MultiheadAttention(cond_dim, heads, batch_first=True)
        self.proj = nn.Linear(4 * cond_dim, cond_dim)

    def tokens(self, categorical: torch.Tensor, continuous: torch.Tensor) -> torch.Tensor:
        if categorical.dim() != 2 or categorical.shape[1] != 3:
            raise RejectedInputError(f"categorical factors must be [B, 3], got {tuple(categorical.shape)}")
        for col, card, name in ((0, NUM_DAYS, "day_of_week"), (1, NUM_HOURS, "hour_of_day"), (2, NUM_WEATHER, "weather_class")):
            c = categorical[:, col]
            if bool(((c < 0) | (c >= card)).any()):
                raise RejectedInputError(f"{name} index outside [0, {card})")
        v_cont = self.cont_mlp(normalize_continuous(continuous))
        return torch.stack(
            [self.day(categorical[:, 0]), self.hour(categorical[:, 1]), self.weather(categorical[:, 2]), v_cont],
            dim=1,
        )

    def forward(self, categorical: torch.Tensor, continuous: torch.Tensor) -> torch.Tensor:
        tok = self.tokens(categorical, continuous)
        mixed, _ = self.attn(tok, tok, tok, need_weights=False)
        return self.proj(mixed.flatten(1))


def embed_factors(factors: ExternalFactors | Sequence[ExternalFactors], embedding: ContextEmbedding) -> torch.Tensor:
    """Condition vector(s) for one record (returns ``[d]``) or a sequence (``[B, d]``)."""
    single = isinstance(factors, ExternalFactors)
    records = [factors] if single else list(factors)
    dtype = next(embedding.parameters()).dtype
    cat, cont = encode_factors(records, dtype=dtype)
    out = embedding(cat, cont)
    return out[0] if single else out
