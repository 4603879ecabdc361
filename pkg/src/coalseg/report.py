"""Run artifacts: CSV/JSON output plus rendered matplotlib figures.

Every figure renders through the Agg backend straight to a file, so
reports work on headless machines.
"""

from __future__ import annotations

import csv
import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np

from .data import CLASS_NAMES, PALETTE
from .dcsa import DCSAConfig, decomposition_table, equivalent_kernel_size, param_reduction_rho
from .metrics import row_normalized


def write_csv(path: str, rows: list, columns: list = None) -> None:
    if not rows:
        raise ValueError("refusing to write an empty CSV")
    columns = columns or list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def write_json(path: str, record: dict) -> None:
    with open(path, "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")


def write_jsonl(path: str, records: list) -> None:
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def plot_history(history, path: str) -> None:
    """Loss and accuracy curves over epochs, side by side."""
    epochs = [e.epoch for e in history.epochs]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(epochs, [e.loss for e in history.epochs], color="#4477aa")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("cross-entropy loss")
    ax1.grid(alpha=0.3)
    ax2.plot(epochs, [e.pa for e in history.epochs], label="PA", color="#228833")
    ax2.plot(epochs, [e.miou for e in history.epochs], label="mIoU", color="#ee6677")
    if history.val:
        ax2.plot([ep for ep, _ in history.val], [m.pa for _, m in history.val],
                 "o--", label="val PA", color="#66ccee")
    ax2.set_xlabel("epoch")
    ax2.set_ylim(0, 1.02)
    ax2.legend()
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_confusion(confusion: np.ndarray, path: str, names=CLASS_NAMES) -> None:
    """Row-normalized heatmap, true classes down, predictions across."""
    norm = row_normalized(confusion)
    k = len(names)
    fig, ax = plt.subplots(figsize=(1.1 * k + 2, 1.1 * k + 1))
    im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(k), names, rotation=30, ha="right")
    ax.set_yticks(range(k), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(k):
        for j in range(k):
            ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center",
                    color="white" if norm[i, j] > 0.5 else "black", fontsize=9)
    fig.colorbar(im, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_decomposition(cfg: DCSAConfig, path: str) -> None:
    """Per-part parameter bars for the kernel decomposition, with the
    monolithic equivalent kernel and reduction rate annotated."""
    rows = decomposition_table(cfg)
    labels = [f"{r['part']}\n{r['kernel']}x{r['kernel']} r{r['dilation']}" for r in rows]
    params = [r["params"] for r in rows]
    kernels = [int(equivalent_kernel_size(k, r)) for k, r in cfg.branches]
    equivalent = max(kernels)
    rho = float(param_reduction_rho([k for k, _ in cfg.branches], equivalent, equivalent))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(labels, params, color="#4477aa")
    ax.set_ylabel(f"parameters per {cfg.channels} channels")
    ax.set_title(f"kernel decomposition vs a {equivalent}x{equivalent} kernel: "
                 f"{rho * 100:.2f}% fewer parameters")
    for i, v in enumerate(params):
        ax.text(i, v, f"{v:,}", ha="center", va="bottom", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_params_breakdown(breakdown: dict, path: str, reference: int = None) -> None:
    """Stage/head parameter shares; optional published total for scale."""
    parts = {k: v for k, v in breakdown.items() if k != "total"}
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(list(parts), list(parts.values()), color="#228833")
    ax.set_ylabel("parameters")
    title = f"total {breakdown['total']:,}"
    if reference:
        title += f" (published reference {reference:,})"
    ax.set_title(title)
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_prediction(image: np.ndarray, mask: np.ndarray, path: str, alpha: float = 0.45) -> None:
    """Input image with the palette-colored mask blended over it."""
    colors = np.array([PALETTE[c] for c in range(len(PALETTE))], dtype=np.float64) / 255.0
    overlay = image * (1 - alpha) + colors[np.clip(mask, 0, len(PALETTE) - 1)] * alpha
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.5))
    axes[0].imshow(image)
    axes[0].set_title("input")
    axes[1].imshow(np.clip(overlay, 0, 1))
    axes[1].set_title("prediction")
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
