"""Report rendering: delimited text tables plus matplotlib figures.

Every CLI report path writes machine-readable CSV next to PNG figures so
results can be inspected at a glance or post-processed. Rendering is
headless (Agg) and deterministic for fixed inputs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIG_DPI = 120


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=FIG_DPI, metadata={"Software": "veilvm"})
    plt.close(fig)


def slot_t_figure(slot_t, threshold: float, path, title: str = "per-slot t statistic"):
    t = np.asarray(slot_t, dtype=float)
    fig, ax = plt.subplots(figsize=(8, 3))
    finite = np.where(np.isfinite(t), t, np.sign(t) * (np.abs(t[np.isfinite(t)]).max() if np.isfinite(t).any() else 1) * 1.2)
    colors = ["#c0392b" if abs(x) >= threshold else "#5b7fa6" for x in t]
    ax.bar(range(len(t)), np.abs(finite), color=colors)
    ax.axhline(threshold, color="k", linestyle="--", linewidth=1, label=f"threshold {threshold}")
    ax.set_xlabel("retired instruction slot")
    ax.set_ylabel("|t|")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def histogram_figure(samples_a, samples_b, labels, path, bins: int = 80,
                     title: str = "latency histogram"):
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.hist(samples_a, bins=bins, alpha=0.6, label=labels[0], color="#5b7fa6")
    ax.hist(samples_b, bins=bins, alpha=0.6, label=labels[1], color="#e67e22")
    ax.set_xlabel("observed latency (cycles)")
    ax.set_ylabel("samples")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def progression_figure(progressions, threshold: float, path,
                       title: str = "t-test progression"):
    """``progressions`` maps a label to a sequence of (n, t) checkpoints."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for label, points in progressions.items():
        ns = [n for n, _ in points]
        ts = [abs(t) for _, t in points]
        ax.plot(ns, ts, marker="o", label=label)
    ax.axhline(threshold, color="k", linestyle="--", linewidth=1)
    ax.set_xscale("log")
    ax.set_xlabel("samples")
    ax.set_ylabel("|t|")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def count_figure(counts, path, title: str = "retired instructions per block"):
    """``counts`` maps a block label to its per-execution retired count."""
    fig, ax = plt.subplots(figsize=(5, 3))
    labels = list(counts)
    ax.bar(labels, [counts[k] for k in labels], color=["#5b7fa6", "#e67e22"][: len(labels)])
    ax.set_ylabel("retired instructions")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def bench_figure(metrics_rows, path, value_key: str = "oram_touches",
                 title: str = "oblivious store touches per variant"):
    fig, ax = plt.subplots(figsize=(6, 3.2))
    variants = [r["variant"] for r in metrics_rows]
    vals = [float(r[value_key]) for r in metrics_rows]
    ax.bar(variants, vals, color="#5b7fa6")
    ax.set_ylabel(value_key)
    ax.set_title(title)
    ax.tick_params(axis="x", labelrotation=20)
    fig.tight_layout()
    _save(fig, path)


def tmatrix_figure(opcodes, t_matrix, threshold: float, path,
                   title: str = "pairwise |t|"):
    n = len(opcodes)
    mat = np.zeros((n, n))
    for i, a in enumerate(opcodes):
        for j, b in enumerate(opcodes):
            if i == j:
                continue
            t = t_matrix.get((a, b), t_matrix.get((b, a), 0.0))
            mat[i, j] = min(abs(t), 4 * threshold) if np.isfinite(t) else 4 * threshold
    fig, ax = plt.subplots(figsize=(7, 6))
    im = ax.imshow(mat, cmap="viridis")
    ax.set_xticks(range(n), opcodes, rotation=90, fontsize=7)
    ax.set_yticks(range(n), opcodes, fontsize=7)
    fig.colorbar(im, ax=ax, label="|t| (clipped)")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
