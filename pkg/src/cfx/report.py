"""Matplotlib figure rendering for run artifacts.

Figures are written next to the delimited outputs they visualize: objective
scatter panels next to front.csv, per-node impact and per-segment diff bars
next to impact.json/diff.csv, and the loss curve next to the checkpoint.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .impact import ImpactReport
from .objectives import ObjectiveVector

OBJECTIVE_LABELS = {
    "validity": "validity (km/h)",
    "proximity": "proximity (feature units)",
    "sparsity": "sparsity (changed genes)",
    "plausibility": "plausibility (feature distance)",
}

FRONT_PANELS = (
    ("validity", "proximity"),
    ("validity", "plausibility"),
    ("proximity", "plausibility"),
)


def save_front_scatter(objectives: Sequence[ObjectiveVector], path: Path | str) -> None:
    """Pairwise objective scatter over the final front."""
    values = {
        name: np.array([getattr(o, name) for o in objectives])
        for name in OBJECTIVE_LABELS
    }
    fig, axes = plt.subplots(1, len(FRONT_PANELS), figsize=(4 * len(FRONT_PANELS), 3.4))
    for ax, (x_name, y_name) in zip(np.atleast_1d(axes), FRONT_PANELS):
        scatter = ax.scatter(
            values[x_name], values[y_name], c=values["validity"], cmap="viridis", s=18
        )
        ax.set_xlabel(OBJECTIVE_LABELS[x_name])
        ax.set_ylabel(OBJECTIVE_LABELS[y_name])
    fig.colorbar(scatter, ax=np.atleast_1d(axes)[-1], label="validity (km/h)")
    fig.suptitle(f"Final front ({len(objectives)} candidates)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curve(trace: dict[str, list[float]], path: Path | str) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(trace["train"], label="train")
    if trace.get("test"):
        ax.plot(trace["test"], label="test")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_impact_chart(report: ImpactReport, path: Path | str) -> None:
    """Per-node day-mean prediction delta, highlighting the extremes."""
    nodes = list(report.per_node_delta)
    means = np.array([report.per_node_delta[n].mean_delta for n in nodes])
    lows = np.array([report.per_node_delta[n].max_decrease for n in nodes])
    highs = np.array([report.per_node_delta[n].max_increase for n in nodes])
    x = np.arange(len(nodes))
    fig, ax = plt.subplots(figsize=(max(6.0, 0.3 * len(nodes)), 3.8))
    ax.bar(x, means, color=np.where(means >= 0, "#2a7", "#c43"))
    ax.vlines(x, lows, highs, color="#888", linewidth=0.8)
    ax.axhline(0.0, color="black", linewidth=0.6)
    ax.set_xticks(x)
    ax.set_xticklabels(nodes, rotation=90, fontsize=6)
    ax.set_ylabel("prediction delta (km/h)")
    ax.set_title(f"Counterfactual impact on {report.day.isoformat()} (bars: day mean, whiskers: extremes)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_diff_chart(report: ImpactReport, path: Path | str) -> None:
    """Per-segment feature changes of the chosen counterfactual."""
    segments = [row["segment"] for row in report.feature_diff]
    x = np.arange(len(segments))
    fig, axes = plt.subplots(3, 1, figsize=(max(6.0, 0.5 * len(segments)), 7.0), sharex=True)
    for ax, feature in zip(axes, ("poi_count", "lane_count", "speed_limit")):
        deltas = [row[feature] for row in report.feature_diff]
        ax.bar(x, deltas, color="#47a")
        ax.axhline(0.0, color="black", linewidth=0.6)
        ax.set_ylabel(f"d {feature}")
    axes[-1].set_xticks(x)
    axes[-1].set_xticklabels(segments, rotation=90, fontsize=7)
    fig.suptitle("Counterfactual minus original static features")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_day_series(report: ImpactReport, path: Path | str) -> None:
    """Truth vs original vs counterfactual prediction for the target node."""
    hours = [ts.hour + ts.minute / 60.0 for ts in report.series_timestamps]
    fig, ax = plt.subplots(figsize=(7, 3.8))
    ax.plot(hours, report.target_series_truth, label="ground truth", color="#999", linewidth=0.9)
    ax.plot(hours, report.target_series_original, label="original prediction", color="#36c")
    ax.plot(hours, report.target_series_counterfactual, label="counterfactual prediction", color="#d62")
    ax.set_xlabel("hour of day")
    ax.set_ylabel("speed (km/h)")
    ax.set_title(f"{report.target_node} on {report.day.isoformat()}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
