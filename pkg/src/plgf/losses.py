"""DualFocal loss, its analytic per-element gradient, and baseline losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .errors import ConfigurationError, RejectedInputError

MODULATORS = ("tanh", "sigmoid")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 10.0
    beta: float = 0.2
    gamma: float = 1.0
    modulator: str = "tanh"
    reduction: str = "mean"
    detach_modulation: bool = False
    focal_scope: str = "element"  # or "batch": focal factor applied to the reduced loss

    def __post_init__(self):
        for name in ("lam", "beta", "gamma"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"{name} must be finite")
        if self.lam < 0:
            raise ConfigurationError("lam must be >= 0")
        if self.beta <= 0:
            raise ConfigurationError("beta must be > 0")
        if self.gamma < 0:
            raise ConfigurationError("gamma must be >= 0")
        if self.modulator not in MODULATORS:
            raise ConfigurationError(f"modulator must be one of {MODULATORS}")
        if self.reduction not in ("mean", "sum"):
            raise ConfigurationError("reduction must be 'mean' or 'sum'")
        if self.focal_scope not in ("element", "batch"):
            raise ConfigurationError("focal_scope must be 'element' or 'batch'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class LossBreakdown:
    """Means over elements of each loss component."""

    l1: float
    log_l1: float
    dual_scale: float
    modulation: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def modulate(x: torch.Tensor, kind: str) -> torch.Tensor:
    # both map [0, inf) onto [0, 1)
    if kind == "tanh":
        return torch.tanh(x)
    if kind == "sigmoid":
        return 2 * torch.sigmoid(x) - 1
    raise ConfigurationError(f"unknown modulator {kind!r}")


def _check_pair(pred: torch.Tensor, truth: torch.Tensor) -> None:
    if pred.shape != truth.shape:
        raise RejectedInputError(f"shape mismatch: pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    if bool((pred < 0).any()) or bool((truth < 0).any()):
        raise RejectedInputError("dual-scale loss requires nonnegative flows")


def _components(pred, truth, lam):
    l1 = (pred - truth).abs()
    log_l1 = (torch.log1p(pred) - torch.log1p(truth)).abs()
    return l1, log_l1, l1 + lam * log_l1


def dual_scale_loss(pred: torch.Tensor, truth: torch.Tensor, config: LossConfig = LossConfig()) -> torch.Tensor:
    """Per-element ``|p - y| + lam * |log1p(p) - log1p(y)|``."""
    _check_pair(pred, truth)
    return _components(pred, truth, config.lam)[2]


def _reduce(x: torch.Tensor, how: str) -> torch.Tensor:
    return x.mean() if how == "mean" else x.sum()


def dualfocal_elementwise(pred: torch.Tensor, truth: torch.Tensor, config: LossConfig = LossConfig()) -> torch.Tensor:
    """Unreduced per-element loss ``f(beta*L_ds)**gamma * L_ds``."""
    _check_pair(pred, truth)
    ds = _components(pred, truth, config.lam)[2]
    m = modulate(config.beta * ds, config.modulator) ** config.gamma
    if config.detach_modulation:
        m = m.detach()
    return m * ds


def dualfocal_loss(pred: torch.Tensor, truth: torch.Tensor, config: LossConfig = LossConfig()):
    """Returns ``(loss, LossBreakdown)`` with per-element loss ``f(beta*L_ds)**gamma * L_ds``."""
    _check_pair(pred, truth)
    l1, log_l1, ds = _components(pred, truth, config.lam)
    if config.focal_scope == "element":
        m = modulate(config.beta * ds, config.modulator) ** config.gamma
        if config.detach_modulation:
            m = m.detach()
        total = _reduce(m * ds, config.reduction)
    else:
        ds_red = _reduce(ds, config.reduction)
        m = modulate(config.beta * ds_red, config.modulator) ** config.gamma
        if config.detach_modulation:
            m = m.detach()
        total = m * ds_red
    with torch.no_grad():
        parts = LossBreakdown(
            l1=float(l1.mean()),
            log_l1=float(log_l1.mean()),
            dual_scale=float(ds.mean()),
            modulation=float(m.mean()),
            total=float(total),
        )
    return total, parts


def l1_component_gradient(pred_value: float, truth_value: float) -> float:
    """d|y - p|/dp = -sgn(y - p)."""
    return -math.copysign(1.0, truth_value - pred_value) if pred_value != truth_value else 0.0


def log_component_gradient(pred_value: float, truth_value: float) -> float:
    """d|log1p(y) - log1p(p)|/dp = -sgn(log1p(y) - log1p(p)) / (1 + p)."""
    diff = math.log1p(truth_value) - math.log1p(pred_value)
    if diff == 0:
        return 0.0
    return -math.copysign(1.0, diff) / (1.0 + pred_value)


def _modulator_and_slope(x: float, kind: str) -> tuple[float, float]:
    if kind == "tanh":
        t = math.tanh(x)
        return t, 1.0 - t * t
    if kind == "sigmoid":
        s = 1.0 / (1.0 + math.exp(-x))
        return 2 * s - 1, 2 * s * (1 - s)
    raise ConfigurationError(f"unknown modulator {kind!r}")


def dualfocal_gradient_oracle(pred_value: float, truth_value: float, config: LossConfig = LossConfig()) -> float:
    """Analytic d(loss)/d(pred) for a single element, written out by hand.

    Chain: D = |p-y| + lam*|log1p p - log1p y|;  L = f(beta*D)**gamma * D.
    """
    p, y = float(pred_value), float(truth_value)
    if p == y:
        raise RejectedInputError("derivative undefined at pred == truth (kink of |.|)")
    if p < 0 or y < 0:
        raise RejectedInputError("oracle requires nonnegative flows")
    d = abs(p - y) + config.lam * abs(math.log1p(p) - math.log1p(y))
    dd = l1_component_gradient(p, y) + config.lam * log_component_gradient(p, y)
    f, fprime = _modulator_and_slope(config.beta * d, config.modulator)
    g = config.gamma
    m = f**g
    if config.detach_modulation or g == 0:
        return m * dd
    dm = g * f ** (g - 1) * fprime * config.beta
    return (m + d * dm) * dd


def baseline_loss(pred: torch.Tensor, truth: torch.Tensor, which: str = "mse") -> torch.Tensor:
    if pred.shape != truth.shape:
        raise RejectedInputError(f"shape mismatch: pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    if which == "mse":
        return ((pred - truth) ** 2).mean()
    if which == "l1":
        return (pred - truth).abs().mean()
    raise ConfigurationError(f"unknown baseline loss {which!r}")


class Criterion:
    """A named training loss: ``dualfocal`` (with a LossConfig), ``mse`` or ``l1``.

    Calling it returns ``(loss, breakdown_dict)``.
    """

    def __init__(self, kind: str = "dualfocal", config: LossConfig | None = None):
        if kind not in ("dualfocal", "mse", "l1"):
            raise ConfigurationError(f"unknown loss {kind!r}")
        self.kind = kind
        self.config = config or LossConfig()

    def __call__(self, pred, truth):
        if self.kind == "dualfocal":
            loss, parts = dualfocal_loss(pred, truth, self.config)
            return loss, parts.to_dict()
        loss = baseline_loss(pred, truth, self.kind)
        return loss, {"total": float(loss.detach())}

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "dualfocal":
            d.update(self.config.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: dict | str) -> "Criterion":
        if isinstance(d, str):
            return cls(d)
        d = dict(d)
        kind = d.pop("kind", "dualfocal")
        return cls(kind, LossConfig.from_dict(d) if kind == "dualfocal" else None)
