"""Delimited metric records and rendered figures.

Every emit path writes machine-readable rows (CSV plus flat key=value
text) and, next to them, matplotlib renderings: colorized disparity
maps, metric-versus-iterations trends, loss curves and ablation bars.
"""

import csv
import json
import os
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def write_csv(path: str, rows: List[Dict[str, object]]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    keys = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_flat_records(path: str, rows: List[Dict[str, object]]) -> None:
    """One `key=value` line per field, blank line between records."""
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            for k, v in row.items():
                f.write(f"{k}={v}\n")
            f.write("\n")


def write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def colorize_disparity(disp: np.ndarray, vmax: Optional[float] = None) -> np.ndarray:
    """Map a disparity field to uint8 RGB with the magma colormap."""
    disp = np.asarray(disp, dtype=np.float64)
    if vmax is None:
        vmax = max(float(disp.max()), 1e-6)
    norm = np.clip(disp / vmax, 0.0, 1.0)
    rgba = matplotlib.colormaps["magma"](norm)
    return (rgba[..., :3] * 255.0 + 0.5).astype(np.uint8)


def save_disparity_png(path: str, disp: np.ndarray, vmax: Optional[float] = None) -> None:
    rgb = colorize_disparity(disp, vmax)
    fig, ax = plt.subplots(figsize=(rgb.shape[1] / 50, rgb.shape[0] / 50), dpi=100)
    ax.imshow(rgb)
    ax.axis("off")
    fig.savefig(path, bbox_inches="tight", pad_inches=0)
    plt.close(fig)


def fig_metric_trend(path: str, iters: Sequence[int], values: Sequence[float], metric: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=110)
    ax.plot(list(iters), list(values), marker="o")
    ax.set_xlabel("refinement iterations")
    ax.set_ylabel(metric)
    ax.set_title(f"{metric} vs iterations")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def fig_loss_curve(path: str, losses: Sequence[float], lrs: Optional[Sequence[float]] = None) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.2), dpi=110)
    ax.plot(np.arange(1, len(losses) + 1), list(losses), lw=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    if lrs is not None:
        ax2 = ax.twinx()
        ax2.plot(np.arange(1, len(lrs) + 1), list(lrs), color="tab:orange", lw=0.8, alpha=0.7)
        ax2.set_ylabel("lr")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def fig_ablation_bars(path: str, labels: Sequence[str], values: Sequence[float], metric: str) -> None:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(labels) + 1.5), 3.4), dpi=110)
    xs = np.arange(len(labels))
    ax.bar(xs, list(values), color="tab:blue")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
