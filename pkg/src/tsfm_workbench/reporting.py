"""Run reports: history CSV, JSON, and rendered training-curve figures.

Every report path writes the delimited history next to a PNG of the same
curves, so a run directory is self-describing without extra tooling.  Metric
tables are expressed as percentages with two decimals.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def write_history_csv(path, rows: list[dict], fieldnames=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    fieldnames = fieldnames or list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def write_json(path, payload: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def metrics_percent(metrics: dict) -> dict:
    """Scores scaled x100 and rounded to 2 decimals (NaN passes through)."""
    return {k: (round(100.0 * v, 2) if not math.isnan(v) else math.nan)
            for k, v in metrics.items()}


def format_mean_std(values) -> str:
    values = np.asarray(values, dtype=np.float64)
    return f"{100.0 * values.mean():.2f} ± {100.0 * values.std():.2f}"


def save_history_figure(path, history: list[dict], title: str = ""):
    """Loss curves (train/val or pretraining loss) with the lr on a twin axis."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    if history and "epoch" in history[0]:
        xs = [row["epoch"] for row in history]
        ax.plot(xs, [row["train_loss"] for row in history], label="train loss")
        ax.plot(xs, [row["val_loss"] for row in history], label="val loss")
        ax.set_xlabel("epoch")
    else:
        xs = [row["step"] for row in history]
        ax.plot(xs, [row["loss"] for row in history], label="loss")
        ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if history:
        twin = ax.twinx()
        twin.plot(xs, [row["lr"] for row in history], color="gray", alpha=0.5, label="lr")
        twin.set_ylabel("learning rate")
    ax.legend(loc="best")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_comparison_figure(path, curves: dict, xlabel: str, ylabel: str, title: str = ""):
    """Overlay named curves; ``curves`` maps label -> (xs, ys)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label, (xs, ys) in curves.items():
        ax.plot(xs, ys, marker="o", markersize=3, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(loc="best")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_fit_outputs(report, report_path):
    """FitReport JSON + history CSV + history figure, side by side."""
    report_path = Path(report_path)
    payload = report.to_dict()
    payload["test_metrics_pct"] = metrics_percent(report.test_metrics)
    write_json(report_path, payload)
    stem = report_path.with_suffix("")
    write_history_csv(Path(str(stem) + "_history.csv"), report.history,
                      fieldnames=["epoch", "train_loss", "val_loss", "lr", "wallclock_s"])
    save_history_figure(Path(str(stem) + "_history.png"), report.history,
                        title=f"fine-tune ({report.status})")
    return report_path


def write_pretrain_outputs(report, out_stem):
    """Pretraining history CSV + figure + JSON summary next to the checkpoint."""
    out_stem = Path(out_stem)
    write_history_csv(Path(str(out_stem) + "_history.csv"), report.history,
                      fieldnames=["step", "loss", "lr"])
    save_history_figure(Path(str(out_stem) + "_history.png"), report.history,
                        title=f"pretraining ({report.status})")
    payload = {
        "status": report.status,
        "steps_run": report.steps_run,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "wallclock_s": report.wallclock_s,
        "seed": report.seed,
        "config": report.config,
    }
    write_json(Path(str(out_stem) + "_report.json"), payload)
