"""Figures and CSV dumps of run records and loss-swap reports."""

from __future__ import annotations

import csv
import logging
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "lr", "train_total", "train_mse", "val_mse", "val_mae", "val_mape", "seconds"]


def history_rows(record) -> list[dict]:
    rows = []
    for e in record.epochs:
        val = e.get("val") or {}
        rows.append({
            "epoch": e["epoch"],
            "lr": e["lr"],
            "train_total": e["train"].get("total"),
            "train_mse": e["train"].get("mse"),
            "val_mse": val.get("mse"),
            "val_mae": val.get("mae"),
            "val_mape": val.get("mape"),
            "seconds": e["seconds"],
        })
    return rows


def _write_csv(path: Path, columns, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else repr(r[k]) if isinstance(r[k], float) else r[k]) for k in columns})
    return path


def emit_plots(records, out_dir, labels=None, swap_reports=()) -> dict[str, list[Path]]:
    """Write per-run curves, a parameter/runtime scatter and loss-swap bars.

    Every figure has a CSV beside it holding exactly the plotted numbers.
    Returns the written paths grouped by kind.
    """
    records = list(records)
    swap_reports = list(swap_reports)
    written: dict[str, list[Path]] = {"curves": [], "history_csv": [], "scatter": [], "swap": []}
    if not records and not swap_reports:
        warnings.warn("emit_plots called with no run records; nothing written", RuntimeWarning, stacklevel=2)
        return written
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = list(labels) if labels else [f"run{i}" for i in range(len(records))]

    for label, rec in zip(labels, records):
        rows = history_rows(rec)
        written["history_csv"].append(_write_csv(out / f"{label}_history.csv", HISTORY_COLUMNS, rows))
        fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(10, 4))
        ep = [r["epoch"] for r in rows]
        ax_loss.plot(ep, [r["train_total"] for r in rows], label="train loss")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("loss")
        ax_loss.legend()
        for key in ("train_mse", "val_mse", "val_mae"):
            ys = [r[key] for r in rows]
            if any(y is not None for y in ys):
                ax_metric.plot(ep, [float("nan") if y is None else y for y in ys], label=key)
        ax_metric.set_xlabel("epoch")
        ax_metric.set_yscale("log")
        ax_metric.legend()
        fig.suptitle(label)
        fig.tight_layout()
        path = out / f"{label}_curves.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written["curves"].append(path)

    if records:
        pts = []
        for label, rec in zip(labels, records):
            secs = [e["seconds"] for e in rec.epochs]
            pts.append({
                "run": label,
                "parameter_count": rec.parameter_count,
                "seconds_per_epoch": sum(secs) / len(secs) if secs else 0.0,
                "test_mae": rec.test.mae if rec.test else None,
            })
        written["scatter"].append(_write_csv(out / "param_runtime.csv", list(pts[0]), pts))
        fig, ax = plt.subplots(figsize=(5, 4))
        for p in pts:
            y = p["test_mae"] if p["test_mae"] is not None else 0.0
            ax.scatter(p["seconds_per_epoch"], y, s=max(p["parameter_count"] / 2e4, 10), alpha=0.6)
            ax.annotate(p["run"], (p["seconds_per_epoch"], y))
        ax.set_xlabel("seconds / epoch")
        ax.set_ylabel("test MAE")
        fig.tight_layout()
        fig.savefig(out / "param_runtime.png", dpi=100)
        plt.close(fig)
        written["scatter"].append(out / "param_runtime.png")

    for i, rep in enumerate(swap_reports):
        metrics = ("mse", "mae", "mape")
        rows = []
        for r in rep["runs"]:
            for m in metrics:
                rows.append({"seed": r["seed"], "metric": m, "loss_a": r["a"][m], "loss_b": r["b"][m]})
        stem = f"loss_swap_{i}"
        written["swap"].append(_write_csv(out / f"{stem}.csv", ["seed", "metric", "loss_a", "loss_b"], rows))
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.5))
        name_a, name_b = rep["loss_a"]["kind"], rep["loss_b"]["kind"]
        for ax, m in zip(axes, metrics):
            a = [r["a"][m] for r in rep["runs"]]
            b = [r["b"][m] for r in rep["runs"]]
            x = range(len(a))
            ax.bar([k - 0.2 for k in x], a, width=0.4, label=name_a)
            ax.bar([k + 0.2 for k in x], b, width=0.4, label=name_b)
            ax.set_xticks(list(x), [str(r["seed"]) for r in rep["runs"]])
            ax.set_xlabel("seed")
            ax.set_title(m.upper())
        axes[0].legend()
        fig.tight_layout()
        fig.savefig(out / f"{stem}.png", dpi=100)
        plt.close(fig)
        written["swap"].append(out / f"{stem}.png")
    return written
