"""Matplotlib report figures rendered next to the delimited outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def loss_curve_figure(log_csv, out_png) -> None:
    steps, totals = [], []
    with open(log_csv) as f:
        for row in csv.DictReader(f):
            if row["total"]:
                steps.append(int(row["step"]))
                totals.append(float(row["total"]))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, totals, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.set_title(Path(log_csv).stem)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def perplexity_figure(matrix: np.ndarray, names: list[str], out_png) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("attribute predicted")
    ax.set_ylabel("latent partition")
    for i in range(len(names)):
        for j in range(len(names)):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center",
                    color="white" if matrix[i, j] < 0.6 else "black", fontsize=8)
    fig.colorbar(im, ax=ax, label="test accuracy")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def ppl_figure(ladders: list[int], values: list[float], out_png) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar([str(t) for t in ladders], values, color="#4878a8")
    ax.set_xlabel("sampling steps")
    ax.set_ylabel("path length (encoder-feature proxy)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
