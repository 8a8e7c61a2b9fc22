# -*- coding: utf-8 -*-
"""
Accuracy curves per incremental step and MC-Mix schedule curves.
Every figure is written next to a CSV holding the plotted numbers.
"""
import glob
import logging
import os
from typing import List, Sequence, Tuple

# headless backend
import matplotlib
matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from cil_errors import UsageError
from experiment_runner import ResultRecord, read_records
from mc_mix import MixSchedule, lambda_hat, mean_function, sample_lambda, schedule_value

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ["step", "classes", "record", "cnn_accuracy", "nme_accuracy"]
SCHEDULE_COLUMNS = ["epoch", "sigma", "mu_const", "mu_hat_pos", "mu_hat_neg"]


def collect_records(pattern: str) -> List[ResultRecord]:
    records = []
    for path in sorted(glob.glob(pattern, recursive=True)):
        records.extend(read_records(path))
    return records


def records_frame(records: Sequence[ResultRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        label = f"{r.name}:{r.config_hash[:8]}"
        for step in r.steps:
            rows.append({"step": step["task"], "classes": step["seen_classes"], "record": label,
                         "cnn_accuracy": step["cnn_accuracy"], "nme_accuracy": step["nme_accuracy"]})
    return pd.DataFrame(rows, columns=RECORD_COLUMNS)


def plot_records(records: Sequence[ResultRecord], out_dir: str, name: str = "accuracy") -> Tuple[str, str]:
    """Accuracy vs number of seen classes, one line per record (solid CNN, dashed NME)."""
    if not records:
        raise UsageError("No result records to plot")
    if not os.path.exists(out_dir):
        os.makedirs(out_dir)
    frame = records_frame(records)
    csv_path = os.path.join(out_dir, f"{name}.csv")
    frame.to_csv(csv_path, index=False)

    fig, ax = plt.subplots(figsize=(7, 5))
    for label, group in frame.groupby("record", sort=False):
        line, = ax.plot(group["classes"], group["cnn_accuracy"], marker="o", label=f"{label} CNN")
        if group["nme_accuracy"].notna().all():
            ax.plot(group["classes"], group["nme_accuracy"], marker="s", linestyle="--",
                    color=line.get_color(), label=f"{label} NME")
    ax.set_xlabel("Number of classes")
    ax.set_ylabel("Accuracy (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    png_path = os.path.join(out_dir, f"{name}.png")
    fig.savefig(png_path, dpi=150, bbox_inches="tight", facecolor="white")
    plt.close(fig)
    logger.info(f"Wrote {png_path} and {csv_path} ({len(records)} records)")
    return png_path, csv_path


def schedule_frame(schedule: MixSchedule, w_pos: float = 0.5, w_neg: float = -0.5) -> pd.DataFrame:
    epochs = np.arange(schedule.total_epochs + 1)
    return pd.DataFrame({
        "epoch": epochs,
        "sigma": [schedule_value(schedule, e) for e in epochs],
        "mu_const": [mean_function(0.0, schedule, e) for e in epochs],
        "mu_hat_pos": [mean_function(w_pos, schedule, e) for e in epochs],
        "mu_hat_neg": [mean_function(w_neg, schedule, e) for e in epochs],
    }, columns=SCHEDULE_COLUMNS)


def plot_schedule(schedule: MixSchedule, out_dir: str, w_pos: float = 0.5, w_neg: float = -0.5,
                  alpha: float = 1.0, samples: int = 600, seed: int = 0) -> Tuple[str, str]:
    """Mean functions for a rare (w>0) and a frequent (w<0) class with sampled lambda_hat."""
    if not os.path.exists(out_dir):
        os.makedirs(out_dir)
    frame = schedule_frame(schedule, w_pos, w_neg)
    csv_path = os.path.join(out_dir, f"schedule_{schedule.kind}.csv")
    frame.to_csv(csv_path, index=False)

    rng = np.random.default_rng(seed)
    fig, axes = plt.subplots(1, 2, figsize=(11, 4), sharey=True)
    for ax, w, column in ((axes[0], w_pos, "mu_hat_pos"), (axes[1], w_neg, "mu_hat_neg")):
        sample_epochs = rng.uniform(0, schedule.total_epochs, size=samples)
        sampled = [lambda_hat(sample_lambda(alpha, rng), w, schedule_value(schedule, e)) for e in sample_epochs]
        ax.scatter(sample_epochs, sampled, s=4, alpha=0.25, color="#4a90d9", label="sampled λ̂")
        ax.plot(frame["epoch"], frame[column], color="#c44536", linewidth=2, label=f"mean (w={w:+.2f})")
        ax.plot(frame["epoch"], frame["mu_const"], color="#666666", linestyle="--", label="CutMix mean")
        ax.axvline(schedule.centre, color="#2d8a4e", linestyle=":", linewidth=1)
        ax.set_xlabel("Epoch")
        ax.set_title(f"{schedule.kind} γ={schedule.gamma} τ={schedule.tau}, w={w:+.2f}")
        ax.legend(fontsize=7)
    axes[0].set_ylabel("λ̂")
    png_path = os.path.join(out_dir, f"schedule_{schedule.kind}.png")
    fig.savefig(png_path, dpi=150, bbox_inches="tight", facecolor="white")
    plt.close(fig)
    logger.info(f"Wrote {png_path} and {csv_path}")
    return png_path, csv_path
