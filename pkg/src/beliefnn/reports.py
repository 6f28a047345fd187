"""Report emission: key=value summaries, CSV tables, and rendered figures.

Every artifact the evaluation commands write is either a flat key=value
report, a CSV table re-parseable by this module, or a PNG figure rendered
from the same data that went into the tables.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "write_report",
    "read_report",
    "write_csv",
    "read_csv",
    "calibration_table",
    "fit_figure",
    "calibration_figure",
    "roc_figure",
    "coverage_figure",
]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(path, values: dict):
    with open(path, "w") as fh:
        for key in sorted(values):
            fh.write(f"{key}={_fmt(values[key])}\n")


def read_report(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, value = line.split("=", 1)
            try:
                out[key] = int(value)
            except ValueError:
                try:
                    out[key] = float(value)
                except ValueError:
                    out[key] = value
    return out


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
    return header, np.asarray(rows)


def calibration_table(confidences, correctness, edges):
    """Per-bin rows (lo, hi, count, mean confidence, accuracy) on sorted data."""
    order = np.argsort(confidences, kind="stable")
    conf = np.asarray(confidences)[order]
    corr = np.asarray(correctness)[order]
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi == lo:
            continue
        rows.append(
            (float(conf[lo]), float(conf[hi - 1]), int(hi - lo), float(conf[lo:hi].mean()), float(corr[lo:hi].mean()))
        )
    return rows


def fit_figure(path, x_train, y_train, x_grid, mu, sigma, true_fn=None):
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.fill_between(x_grid, mu - 2 * sigma, mu + 2 * sigma, alpha=0.25, label="±2σ")
    ax.plot(x_grid, mu, label="predictive mean")
    if true_fn is not None:
        ax.plot(x_grid, true_fn(x_grid), "--", lw=1, label="true function")
    ax.plot(x_train, y_train, ".", ms=3, alpha=0.6, label="train data")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def calibration_figure(path, rows):
    fig, ax = plt.subplots(figsize=(5, 5))
    conf = [r[3] for r in rows]
    acc = [r[4] for r in rows]
    ax.plot([0, 1], [0, 1], "k--", lw=1, label="ideal")
    ax.plot(conf, acc, "o-", label="model")
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def roc_figure(path, fpr, tpr, auroc):
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(fpr, tpr, label=f"AUROC={auroc:.3f}")
    ax.plot([0, 1], [0, 1], "k--", lw=1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def coverage_figure(path, p_grid, median_pos, median_neg, corr_combined):
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [0, 1], "k--", lw=1, label="ideal")
    ax.plot(p_grid, median_pos, label="median coverage, x > threshold")
    ax.plot(p_grid, median_neg, label="median coverage, x < -threshold")
    ax.set_xlabel("credible mass p")
    ax.set_ylabel("coverage rate")
    ax.set_title(f"combined correlation {corr_combined:.3f}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def roc_points(pos_scores, neg_scores):
    """Threshold-sweep ROC curve (fpr, tpr arrays) for figure rendering."""
    scores = np.concatenate([pos_scores, neg_scores])
    labels = np.concatenate([np.ones(len(pos_scores)), np.zeros(len(neg_scores))])
    order = np.argsort(-scores, kind="stable")
    labels = labels[order]
    tpr = np.concatenate([[0.0], np.cumsum(labels) / max(labels.sum(), 1)])
    fpr = np.concatenate([[0.0], np.cumsum(1 - labels) / max((1 - labels).sum(), 1)])
    return fpr, tpr
