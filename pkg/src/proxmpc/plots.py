"""Figure rendering for report outputs.

Figures are rendered headless (Agg) to PNG files next to the delimited
outputs they visualize; the CSV/JSON artifacts remain the primary record.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 150


def save_cost_per_policy(rows: list[dict], prescient_cost: float, path) -> Path:
    """Bar chart of mean cost per hour by policy, with the prescient line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = [r["label"] for r in rows]
    means = [r["mean_cost_per_hour"] for r in rows]
    stds = [r.get("std_cost_per_hour", 0.0) for r in rows]
    colors = {"mpc": "tab:gray", "mf_mpc": "tab:blue", "ip_mpc": "tab:orange"}

    fig, ax = plt.subplots(figsize=(max(6.0, 0.8 * len(rows) + 2), 4.0))
    xs = np.arange(len(rows))
    ax.bar(xs, means, yerr=stds, capsize=3,
           color=[colors.get(r["kind"], "tab:green") for r in rows])
    ax.axhline(prescient_cost, color="black", linestyle="--", linewidth=1,
               label=f"prescient ({prescient_cost:.1f})")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("mean cost per hour")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_rms_per_lead(rms_by_lead, path) -> Path:
    """RMS log-price forecast error versus lead time."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rms = np.asarray(rms_by_lead, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(np.arange(1, len(rms) + 1), rms, marker="o", markersize=3)
    ax.set_xlabel("lead time (hours ahead)")
    ax.set_ylabel("RMS log-price error")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_prescient_schedule(prices, u, q, path) -> Path:
    """Prices, charging schedule and stored energy of the prescient LP."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    prices = np.asarray(prices, dtype=float)
    hours = np.arange(len(prices))
    fig, axes = plt.subplots(3, 1, figsize=(8, 6), sharex=True)
    axes[0].plot(hours, prices, linewidth=0.8)
    axes[0].set_ylabel("price")
    axes[1].step(hours, u, where="post", linewidth=0.8, color="tab:orange")
    axes[1].set_ylabel("charge rate")
    axes[2].plot(hours, q, linewidth=0.8, color="tab:green")
    axes[2].set_ylabel("stored energy")
    axes[2].set_xlabel("hour")
    for ax in axes:
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_price_series(timestamps, prices, split_at: int | None, path) -> Path:
    """The full price series, optionally colored by train/test split."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    prices = np.asarray(prices, dtype=float)
    xs = np.arange(len(prices))
    fig, ax = plt.subplots(figsize=(9, 3.5))
    if split_at is None:
        ax.plot(xs, prices, linewidth=0.5)
    else:
        ax.plot(xs[:split_at], prices[:split_at], linewidth=0.5, label="train")
        ax.plot(xs[split_at:], prices[split_at:], linewidth=0.5, label="test")
        ax.legend(fontsize=8)
    ax.set_xlabel("hour")
    ax.set_ylabel("price")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path
