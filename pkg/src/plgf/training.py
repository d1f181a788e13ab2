"""Training loop, evaluation, ablations and the loss-swap experiment."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SplitData, load_dataset
from .errors import ConfigurationError, NonFiniteLossError
from .flow import MetricReport, compute_metrics, conservation_residual
from .losses import Criterion, LossConfig
from .model import ModelConfig, build_model, count_parameters

log = logging.getLogger(__name__)

RUN_RECORD_SCHEMA = "plgf.run_record/1"
ABLATION_SCHEMA = "plgf.ablation/1"
LOSS_SWAP_SCHEMA = "plgf.loss_swap/1"

ABLATION_SWITCHES = ("wo_film", "wo_fusion", "wo_cga", "wo_dualfocal", "wo_logarithmic")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: dict | str = "dualfocal"
    architecture: str = "plgf"
    dataset: str = ""
    output_dir: str = "runs/default"
    seed: int = 0
    learning_rate: float = 3e-4
    lr_decay_every: int = 8
    lr_decay_factor: float = 0.5
    epochs: int = 100
    batch_size: int = 20
    patience: int = 15
    grad_clip: float | None = None
    mape_mode: str = "masked"
    resume: bool = False

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0 or self.lr_decay_every < 1:
            raise ConfigurationError("learning_rate, batch_size and lr_decay_every must be positive, epochs >= 0")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError("grad_clip must be positive when set")
        Criterion.from_dict(self.loss)  # validates

    def criterion(self) -> Criterion:
        return Criterion.from_dict(self.loss)

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["model"] = self.model.to_dict()
        d["loss"] = self.criterion().to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ExperimentConfig":
        new = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(new, k, v)
        new.__post_init__()
        return new


@dataclass
class RunRecord:
    config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    best_checkpoint: str | None = None
    test: MetricReport | None = None
    parameter_count: int = 0
    stopped_early: bool = False
    schema: str = RUN_RECORD_SCHEMA

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "config": self.config,
            "parameter_count": self.parameter_count,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_checkpoint": self.best_checkpoint,
            "stopped_early": self.stopped_early,
            "test": self.test.to_dict() if self.test else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        if d.get("schema") != RUN_RECORD_SCHEMA:
            raise ConfigurationError(f"unsupported run record schema {d.get('schema')!r}")
        return cls(
            config=d["config"],
            epochs=d["epochs"],
            best_epoch=d["best_epoch"],
            best_checkpoint=d["best_checkpoint"],
            test=MetricReport.from_dict(d["test"]) if d.get("test") else None,
            parameter_count=d["parameter_count"],
            stopped_early=d.get("stopped_early", False),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Batch(NamedTuple):
    coarse: torch.Tensor
    fine: torch.Tensor
    categorical: torch.Tensor
    continuous: torch.Tensor


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def iterate_batches(split: SplitData, batch_size: int, generator: torch.Generator | None = None, dtype=torch.float32):
    tensors = split.tensors(dtype)
    n = len(split)
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(*(t[idx] for t in tensors))


def model_predictor(model: torch.nn.Module) -> Callable[[Batch], torch.Tensor]:
    def predict(batch: Batch) -> torch.Tensor:
        return model(batch.coarse, batch.categorical, batch.continuous)
    return predict


def truth_predictor(batch: Batch) -> torch.Tensor:
    """Oracle adapter returning the ground truth; useful to sanity-check evaluation."""
    return batch.fine


def predict_split(predict: Callable[[Batch], torch.Tensor], split: SplitData, batch_size: int = 64) -> np.ndarray:
    outs = []
    with torch.no_grad():
        for batch in iterate_batches(split, batch_size):
            outs.append(predict(batch)[:, 0].cpu().numpy())
    if not outs:
        return np.zeros((0, *split.fine.shape[1:]), dtype=np.float32)
    return np.concatenate(outs)


def evaluate_predictions(predict, split: SplitData, mape_mode: str = "masked", batch_size: int = 64) -> MetricReport:
    pred = predict_split(predict, split, batch_size)
    report = compute_metrics(pred, split.fine, mape_mode)
    rel = _relation(split)
    report.conservation_residual = conservation_residual(pred, split.coarse, rel)
    return report


def _relation(split: SplitData):
    from .flow import GridRelation
    return GridRelation.from_shapes(split.coarse.shape[1:], split.fine.shape[1:])


def evaluate_model(model: torch.nn.Module, split: SplitData, mape_mode: str = "masked") -> MetricReport:
    was_training = model.training
    model.eval()
    try:
        return evaluate_predictions(model_predictor(model), split, mape_mode)
    finally:
        model.train(was_training)


def evaluate(checkpoint, split: SplitData | tuple, mape_mode: str = "masked") -> MetricReport:
    """Metrics of a saved checkpoint on a split.

    ``split`` is a loaded :class:`SplitData` or ``(dataset_path, split_name)``.
    """
    if isinstance(split, tuple):
        path, name = split
        _, splits = load_dataset(path)
        split = splits[name]
    model = load_checkpoint(checkpoint)
    return evaluate_model(model, split, mape_mode)


def _check_compatible(cfg: ExperimentConfig, relation) -> None:
    if cfg.model.upscale_factor != relation.upscale_factor:
        raise ConfigurationError(
            f"model upscales x{cfg.model.upscale_factor} ({cfg.model.stages} stages) "
            f"but dataset needs x{relation.upscale_factor}"
        )
    if cfg.architecture == "plgf":
        cfg.model.check_input(relation.coarse_shape)


def train(cfg: ExperimentConfig, splits: dict | None = None) -> RunRecord:
    """Train per the experiment config and return the run record.

    Keeps the best-validation checkpoint (by validation MSE), stops after
    ``patience`` epochs without improvement, restores the best checkpoint and
    reports test metrics.  With ``resume`` the run continues from
    ``<output_dir>/state.pt`` if present.
    """
    out = Path(cfg.output_dir)
    if splits is None:
        manifest, splits = load_dataset(cfg.dataset)
        relation = manifest.relation
    else:
        relation = _relation(splits["train"])
    _check_compatible(cfg, relation)
    criterion = cfg.criterion()

    seed_everything(cfg.seed)
    model = build_model(cfg.model, cfg.architecture)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_decay_every, gamma=cfg.lr_decay_factor)
    gen = torch.Generator().manual_seed(cfg.seed)

    out.mkdir(parents=True, exist_ok=True)
    best_path = out / "best.ckpt"
    state_path = out / "state.pt"
    record = RunRecord(config=cfg.to_dict(), parameter_count=count_parameters(model))
    best_score = math.inf
    since_best = 0
    start_epoch = 0
    if cfg.resume and state_path.is_file():
        state = torch.load(state_path, weights_only=False)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        sched.load_state_dict(state["scheduler"])
        gen.set_state(state["generator"])
        torch.set_rng_state(state["torch_rng"])
        record.epochs = state["epochs"]
        record.best_epoch = state["best_epoch"]
        best_score = state["best_score"]
        since_best = state["since_best"]
        start_epoch = len(record.epochs)
        log.info("resumed %s at epoch %d", out, start_epoch)

    if record.best_epoch is None:
        save_checkpoint(model, best_path, cfg.architecture)
    record.best_checkpoint = str(best_path)
    train_split, val_split = splits["train"], splits["val"]
    if len(train_split) == 0 and cfg.epochs:
        raise ConfigurationError("training split is empty")

    for epoch in range(start_epoch, cfg.epochs):
        if since_best >= cfg.patience:
            record.stopped_early = True
            break
        t0 = time.perf_counter()
        lr = opt.param_groups[0]["lr"]
        model.train()
        sums: dict[str, float] = {}
        sq_err = 0.0
        cells = 0
        for bi, batch in enumerate(iterate_batches(train_split, cfg.batch_size, gen)):
            pred = model(batch.coarse, batch.categorical, batch.continuous)
            loss, parts = criterion(pred, batch.fine)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch} batch {bi}",
                    {"epoch": epoch, "batch": bi, "loss": parts},
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            n = batch.coarse.shape[0]
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * n
            with torch.no_grad():
                sq_err += float(((pred - batch.fine).double() ** 2).sum())
                cells += pred.numel()
        train_parts = {k: v / len(train_split) for k, v in sums.items()}
        train_parts["mse"] = sq_err / max(cells, 1)
        val = evaluate_model(model, val_split, cfg.mape_mode) if len(val_split) else None
        score = val.mse if val is not None else train_parts["mse"]
        improved = score < best_score
        if improved:
            best_score = score
            since_best = 0
            record.best_epoch = epoch
            save_checkpoint(model, best_path, cfg.architecture, {"epoch": epoch})
        else:
            since_best += 1
        sched.step()
        record.epochs.append({
            "epoch": epoch,
            "lr": lr,
            "train": train_parts,
            "val": val.to_dict() if val else None,
            "improved": improved,
            "seconds": time.perf_counter() - t0,
        })
        log.info("epoch %d lr %.2e train %.4f val_mse %s", epoch, lr, train_parts.get("total", 0.0),
                 f"{val.mse:.4f}" if val else "-")
        torch.save({
            "model": model.state_dict(),
            "optimizer": opt.state_dict(),
            "scheduler": sched.state_dict(),
            "generator": gen.get_state(),
            "torch_rng": torch.get_rng_state(),
            "epochs": record.epochs,
            "best_epoch": record.best_epoch,
            "best_score": best_score,
            "since_best": since_best,
        }, state_path)

    best = load_checkpoint(best_path)
    record.test = evaluate_model(best, splits["test"], cfg.mape_mode) if len(splits["test"]) else None
    record.save(out / "run_record.json")
    return record


# ---------------------------------------------------------------- ablations

def ablation_variant(cfg: ExperimentConfig, switch: str) -> ExperimentConfig:
    if switch == "wo_film":
        return cfg.replace(model=cfg.model.with_ablation("no_film"))
    if switch == "wo_fusion":
        return cfg.replace(model=cfg.model.with_ablation("no_fusion"))
    if switch == "wo_cga":
        return cfg.replace(model=cfg.model.with_ablation("no_cga"))
    if switch == "wo_dualfocal":
        return cfg.replace(loss="mse")
    if switch == "wo_logarithmic":
        crit = cfg.criterion()
        base = crit.config if crit.kind == "dualfocal" else LossConfig()
        return cfg.replace(loss={"kind": "dualfocal", **{**base.to_dict(), "lam": 0.0}})
    raise ConfigurationError(f"unknown ablation switch {switch!r}; choose from {ABLATION_SWITCHES}")


def run_ablation(cfg: ExperimentConfig, switches=(), splits: dict | None = None) -> dict:
    """Train the full model and one variant per switch under identical seed and schedule."""
    switches = list(switches)
    variants = [("full", cfg)] + [(s, ablation_variant(cfg, s)) for s in switches]
    if splits is None:
        _, splits = load_dataset(cfg.dataset)
    rows = []
    for name, vcfg in variants:
        vcfg = vcfg.replace(output_dir=str(Path(cfg.output_dir) / name)) if switches else vcfg
        rec = train(vcfg, splits)
        t = rec.test
        rows.append({
            "variant": name,
            "parameter_count": rec.parameter_count,
            "loss": vcfg.criterion().to_dict(),
            "mse": t.mse if t else None,
            "mae": t.mae if t else None,
            "mape": t.mape if t else None,
            "run_record": str(Path(vcfg.output_dir) / "run_record.json"),
        })
    table = {"schema": ABLATION_SCHEMA, "rows": rows}
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.output_dir) / "ablation.json").write_text(json.dumps(table, indent=2))
    return table


# ---------------------------------------------------------------- loss swap

def run_loss_swap(cfg: ExperimentConfig, loss_a, loss_b, seeds=(0, 1, 2, 3, 4), splits: dict | None = None) -> dict:
    """Train ``cfg.architecture`` under two losses with matched seeds and compare test metrics.

    Deltas are ``b - a``; a "win" for b means a strictly lower metric.
    """
    if cfg.architecture not in ("plgf", "simple_srnet"):
        raise ConfigurationError("loss swap supports architectures 'plgf' and 'simple_srnet'")
    if splits is None:
        _, splits = load_dataset(cfg.dataset)
    runs = []
    for seed in seeds:
        res = {"seed": seed}
        for tag, loss in (("a", loss_a), ("b", loss_b)):
            rcfg = cfg.replace(loss=loss, seed=seed, output_dir=str(Path(cfg.output_dir) / f"seed{seed}_{tag}"))
            rec = train(rcfg, splits)
            res[tag] = rec.test.to_dict()
        runs.append(res)
    metrics = ("mse", "mae", "mape")
    report = {
        "schema": LOSS_SWAP_SCHEMA,
        "architecture": cfg.architecture,
        "loss_a": Criterion.from_dict(loss_a).to_dict(),
        "loss_b": Criterion.from_dict(loss_b).to_dict(),
        "seeds": list(seeds),
        "runs": runs,
        "mean_delta": {m: float(np.mean([r["b"][m] - r["a"][m] for r in runs])) for m in metrics},
        "relative_delta": {
            m: float(np.mean([(r["b"][m] - r["a"][m]) / r["a"][m] if r["a"][m] else 0.0 for r in runs]))
            for m in metrics
        },
        "wins_b": {m: sum(r["b"][m] < r["a"][m] for r in runs) for m in metrics},
        "wins_a": {m: sum(r["a"][m] < r["b"][m] for r in runs) for m in metrics},
    }
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.output_dir) / "loss_swap.json").write_text(json.dumps(report, indent=2))
    return report
