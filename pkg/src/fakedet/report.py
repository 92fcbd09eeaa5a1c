"""Run reports: delimited history/metrics files plus rendered figures.

Training emits one CSV row per epoch; next to it we render the loss/metric
curves and the learning-rate schedule. Evaluation reports write a metrics
CSV alongside an ROC curve and a score histogram. matplotlib is imported
lazily so the CLI stays fast for non-reporting commands.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

HISTORY_FIELDS = ["epoch", "lr", "train_loss", "val_loss", "val_acc", "val_auroc"]


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_FIELDS})


def render_history_figure(history, path):
    """Loss/metric curves on the left, learning-rate schedule on the right."""
    plt = _pyplot()
    epochs = [row["epoch"] for row in history]
    fig, (ax_loss, ax_lr) = plt.subplots(1, 2, figsize=(9, 3.4))

    ax_loss.plot(epochs, [row["train_loss"] for row in history], label="train loss")
    ax_loss.plot(epochs, [row["val_loss"] for row in history], label="val loss")
    ax_loss.plot(epochs, [row["val_acc"] for row in history], "--", label="val acc")
    ax_loss.set_xlabel("epoch")
    ax_loss.legend(fontsize=8)
    ax_loss.set_title("training history")

    ax_lr.plot(epochs, [row["lr"] for row in history])
    ax_lr.set_xlabel("epoch")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_title("cosine schedule")

    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def roc_points(labels, scores):
    """(fpr, tpr) swept over score thresholds, ends pinned at (0,0) and (1,1)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="mergesort")
    y = labels[order] == 1
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # collapse runs of tied scores to one point
    keep = np.flatnonzero(np.diff(scores[order]) != 0)
    keep = np.concatenate([keep, [len(y) - 1]])
    tpr = np.concatenate([[0.0], tp[keep] / max(tp[-1], 1)])
    fpr = np.concatenate([[0.0], fp[keep] / max(fp[-1], 1)])
    return fpr, tpr


def write_metrics_csv(metrics, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["acc", "auroc", "loss"])
        writer.writerow([metrics.acc, "" if metrics.auroc is None else metrics.auroc, metrics.loss])


def render_eval_figures(labels, scores, roc_path, hist_path):
    plt = _pyplot()
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)

    fpr, tpr = roc_points(labels, scores)
    area = float(np.trapezoid(tpr, fpr))
    fig, ax = plt.subplots(figsize=(4.2, 4))
    ax.plot(fpr, tpr)
    ax.plot([0, 1], [0, 1], ":", color="gray")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"ROC (area {area:.4f})")
    fig.tight_layout()
    fig.savefig(roc_path, dpi=110)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    bins = np.linspace(0, 1, 33)
    ax.hist(scores[labels == 0], bins=bins, alpha=0.6, label="real")
    ax.hist(scores[labels == 1], bins=bins, alpha=0.6, label="fake")
    ax.set_xlabel("predicted fake probability")
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(hist_path, dpi=110)
    plt.close(fig)


def write_training_report(history, out_dir, stem):
    """history CSV + rendered curves; returns the CSV path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}_history.csv"
    write_history_csv(history, csv_path)
    render_history_figure(history, out_dir / f"{stem}_history.png")
    return csv_path


def write_eval_report(metrics, labels, scores, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(metrics, out_dir / "metrics.csv")
    render_eval_figures(labels, scores, out_dir / "roc.png", out_dir / "score_hist.png")
