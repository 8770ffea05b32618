"""Figure rendering for training logs, eval reports and latency results.

Everything is drawn with the Agg backend and written as SVG, so no display
server is required.
"""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ["loss_total", "loss_reg", "loss_cls", "loss_aux"]
METRIC_KEYS = ["val_minade6", "val_minfde6", "val_mr6", "val_brier_minfde6"]


def plot_loss_curves(records: Sequence[dict], out_path) -> None:
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in LOSS_KEYS:
        ax.plot(epochs, [r[key] for r in records], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_metrics_vs_epoch(records: Sequence[dict], out_path) -> None:
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in METRIC_KEYS:
        ax.plot(epochs, [r[key] for r in records], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("metric")
    ax.legend(fontsize=8)
    ax.set_title("validation metrics")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_report(per_scenario: Sequence[dict], out_path) -> None:
    values = [r["minfde_6"] for r in per_scenario]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(values, bins=min(30, max(5, len(values) // 3 + 1)), color="tab:blue", alpha=0.8)
    ax.set_xlabel("minFDE$_6$ [m]")
    ax.set_ylabel("scenarios")
    ax.set_title("per-scenario endpoint error")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_latency_vs_metric(points: Sequence[dict], out_path) -> None:
    """Scatter of median latency against brier-minFDE, one point per variant."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for p in points:
        ax.scatter(p["median_ms"], p["metric"], s=60)
        ax.annotate(p["label"], (p["median_ms"], p["metric"]),
                    textcoords="offset points", xytext=(6, 4), fontsize=8)
    ax.set_xlabel("median forward latency [ms]")
    ax.set_ylabel("brier-minFDE$_6$")
    ax.set_title("latency vs accuracy")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
