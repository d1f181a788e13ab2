"""Grid geometry, coarse/fine aggregation, conservation checks and metrics.

All functions here are pure.  Flow maps are stored as float32; aggregation
oracles, conservation checks and metrics are evaluated in float64.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, RejectedInputError

__all__ = [
    "FlowMap",
    "GridRelation",
    "MetricReport",
    "aggregate",
    "upsample_nearest",
    "conservation_residual",
    "compute_metrics",
    "MASKED_EPS",
    "GUARDED_EPS",
]

MASKED_EPS = 1e-6
GUARDED_EPS = 1.0


@dataclass(frozen=True)
class FlowMap:
    """A nonnegative 2-D grid of flow volumes."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 2 or 0 in arr.shape:
            raise RejectedInputError(f"flow map must be a non-empty 2-D grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise RejectedInputError("flow map contains non-finite values")
        if np.any(arr < 0):
            raise RejectedInputError("flow map contains negative flow volumes")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class GridRelation:
    """Coarse grid of ``coarse_shape`` whose cells each cover an N x N fine block."""

    upscale_factor: int
    coarse_shape: tuple[int, int]

    def __post_init__(self):
        n = self.upscale_factor
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise ConfigurationError(f"upscale factor must be a positive integer, got {n!r}")
        if n & (n - 1):
            raise ConfigurationError(f"upscale factor must be a power of 2, got {n}")
        shape = tuple(int(s) for s in self.coarse_shape)
        if len(shape) != 2 or min(shape) < 1:
            raise ConfigurationError(f"coarse shape must be two positive ints, got {self.coarse_shape!r}")
        object.__setattr__(self, "coarse_shape", shape)
        object.__setattr__(self, "upscale_factor", int(n))

    @property
    def fine_shape(self) -> tuple[int, int]:
        h, w = self.coarse_shape
        return (h * self.upscale_factor, w * self.upscale_factor)

    @property
    def stages(self) -> int:
        return int(math.log2(self.upscale_factor))

    @classmethod
    def from_shapes(cls, coarse_shape, fine_shape) -> "GridRelation":
        ch, cw = coarse_shape
        fh, fw = fine_shape
        if fh % ch or fw % cw or fh // ch != fw // cw:
            raise RejectedInputError(f"fine shape {fine_shape} is not a uniform multiple of {coarse_shape}")
        return cls(fh // ch, (ch, cw))


@dataclass
class MetricReport:
    mse: float
    mae: float
    mape: float
    cells_evaluated: int
    mape_empty: bool = False
    conservation_residual: float | None = field(default=None)

    def to_dict(self) -> dict:
        return {
            "mse": self.mse,
            "mae": self.mae,
            "mape": self.mape,
            "cells_evaluated": self.cells_evaluated,
            "mape_empty": self.mape_empty,
            "conservation_residual": self.conservation_residual,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, FlowMap) else np.asarray(x)


def _check_trailing(arr: np.ndarray, expected: tuple[int, int], what: str) -> None:
    if arr.ndim < 2 or tuple(arr.shape[-2:]) != tuple(expected):
        raise RejectedInputError(f"{what} has shape {arr.shape}, expected trailing dims {expected}")


def aggregate(fine, relation: GridRelation):
    """Sum each N x N fine block into its coarse parent cell.

    Accepts a :class:`FlowMap` (returns a FlowMap) or an array whose last two
    axes are the fine grid (returns an array with the same leading axes).
    """
    arr = _values(fine)
    _check_trailing(arr, relation.fine_shape, "fine map")
    n = relation.upscale_factor
    h, w = relation.coarse_shape
    lead = arr.shape[:-2]
    out = arr.reshape(*lead, h, n, w, n).sum(axis=(-3, -1), dtype=np.float64)
    if isinstance(fine, FlowMap):
        return FlowMap(out.astype(np.float32))
    return out.astype(arr.dtype if arr.dtype.kind == "f" else np.float64)


def upsample_nearest(coarse, n: int) -> np.ndarray:
    """Replicate every coarse cell over an n x n block."""
    arr = _values(coarse)
    return np.repeat(np.repeat(arr, n, axis=-2), n, axis=-1)


def conservation_residual(fine, coarse, relation: GridRelation) -> float:
    """Max over coarse cells of ``|aggregate(fine) - coarse| / (coarse + 1)``."""
    f = np.asarray(_values(fine), dtype=np.float64)
    c = np.asarray(_values(coarse), dtype=np.float64)
    _check_trailing(c, relation.coarse_shape, "coarse map")
    agg = aggregate(f, relation)
    if agg.shape != c.shape:
        raise RejectedInputError(f"leading dims differ: fine {f.shape} vs coarse {c.shape}")
    return float(np.max(np.abs(agg - c) / (c + 1.0)))


def compute_metrics(pred, truth, mape_mode: str = "masked") -> MetricReport:
    """MSE, MAE and MAPE between a predicted and a true flow map.

    ``mape_mode="masked"`` evaluates MAPE only on cells where ``truth > 0``
    with a 1e-6 guard; ``"guarded"`` uses all cells with a guard of 1.0.
    MAPE is a fraction, not a percentage.
    """
    p = np.asarray(_values(pred), dtype=np.float64)
    t = np.asarray(_values(truth), dtype=np.float64)
    if p.shape != t.shape:
        raise RejectedInputError(f"shape mismatch: pred {p.shape} vs truth {t.shape}")
    if p.size == 0:
        raise RejectedInputError("cannot compute metrics on empty maps")
    err = p - t
    mse = float(np.mean(err * err))
    mae = float(np.mean(np.abs(err)))
    if mape_mode == "masked":
        mask = t > 0
        eps = MASKED_EPS
    elif mape_mode == "guarded":
        mask = np.ones(t.shape, dtype=bool)
        eps = GUARDED_EPS
    else:
        raise ConfigurationError(f"unknown mape_mode {mape_mode!r}")
    count = int(mask.sum())
    if count == 0:
        warnings.warn("MAPE mask is empty; reporting mape=0", RuntimeWarning, stacklevel=2)
        return MetricReport(mse, mae, 0.0, 0, mape_empty=True)
    mape = float(np.mean(np.abs(err[mask] / (t[mask] + eps))))
    return MetricReport(mse, mae, mape, count)
