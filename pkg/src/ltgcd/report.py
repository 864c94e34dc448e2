"""Delimited outputs and figures for a training run directory."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import GROUPS, group_of  # noqa: E402

METRIC_COLUMNS = ("stage", "epoch", "L_cls_u", "L_cls_s", "L_gud", "L_rep_u", "L_rep_s",
                  "L_bal", "row_violation", "col_violation")
LOSS_KEYS = ("L_cls_u", "L_cls_s", "L_gud", "L_rep_u", "L_rep_s", "L_bal")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def write_metrics(path, history) -> None:
    write_csv(path, METRIC_COLUMNS, ([h[k] for k in METRIC_COLUMNS] for h in history))


def write_distribution(path, history, true_dist=None) -> None:
    """One row per (stage-1 epoch, class): learned and estimated mass."""
    rows = []
    for h in history:
        if h["pi"] is None:
            continue
        for c, (p, pt) in enumerate(zip(h["pi"], h["pi_tilde"])):
            truth = None if true_dist is None else float(true_dist[c])
            rows.append((h["epoch"], c, p, pt, truth))
    write_csv(path, ("epoch", "column", "pi", "pi_tilde", "true"), rows)


def write_estimates(path, estimates) -> None:
    rows = [(e["epoch"], c, s, p, e["alpha"])
            for e in estimates for c, (s, p) in enumerate(zip(e["sizes"], e["pi_tilde"]))]
    write_csv(path, ("epoch", "column", "size", "pi_tilde", "alpha"), rows)


def write_weights(path, refreshes) -> None:
    rows = [(r["epoch"], c, s) for r in refreshes for c, s in enumerate(r["class_mean_scale"])]
    write_csv(path, ("epoch", "class", "mean_scale"), rows)


def write_groups(path, report: dict) -> None:
    rows = []
    for subset in ("all", "known", "novel"):
        g = report[f"groups_{subset}"]
        rows.append((subset, *(g[k] for k in (*GROUPS, "std"))))
    write_csv(path, ("subset", *GROUPS, "std"), rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _floats(rows, key):
    return np.array([float(r[key]) if r[key] != "" else np.nan for r in rows])


# -- figures ---------------------------------------------------------------


def plot_losses(metrics_rows, path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(metrics_rows))
    for key in LOSS_KEYS:
        y = _floats(metrics_rows, key)
        if np.isfinite(y).any():
            ax.plot(x, y, label=key)
    ax.set_xlabel("epoch (stage 1 then stage 2)")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_distribution(pi, pi_tilde, truth, path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    C = len(pi)
    x = np.arange(C)
    w = 0.27
    ax.bar(x - w, truth, w, label="true")
    ax.bar(x, pi_tilde, w, label="estimated")
    ax.bar(x + w, pi, w, label="learned")
    ax.set_xlabel("classifier column (true mass is that of its matched class)")
    ax.set_ylabel("mass")
    ax.set_xticks(x)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_class_accuracy(class_acc, class_sizes, path, many_above=100, few_below=20,
                        baseline=None) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    groups = group_of(class_sizes, many_above, few_below)
    colors = {"many": "tab:blue", "medium": "tab:orange", "few": "tab:red"}
    acc = np.array([np.nan if a is None else a for a in class_acc], dtype=float)
    x = np.arange(len(acc))
    ax.bar(x, acc, color=[colors[g] for g in groups])
    if baseline is not None:
        base = np.array([np.nan if a is None else a for a in baseline], dtype=float)
        ax.plot(x, base, "k_", markersize=14, label="stage 1")
        ax.legend(fontsize=8)
    ax.set_xlabel("class (colour = Many / Medium / Few)")
    ax.set_ylabel("test accuracy (%)")
    ax.set_ylim(0, 105)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_weights(weight_rows, path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    epochs = sorted({int(r["epoch"]) for r in weight_rows})
    for e in epochs:
        sel = [r for r in weight_rows if int(r["epoch"]) == e]
        ax.plot([int(r["class"]) for r in sel], [float(r["mean_scale"]) for r in sel],
                marker="o", label=f"epoch {e}")
    ax.set_xlabel("class (largest first)")
    ax.set_ylabel("mean 1 + w")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def render(run_dir) -> list[Path]:
    """Draw every figure the run directory has data for; returns the paths."""
    run_dir = Path(run_dir)
    made = []
    cfg = json.loads((run_dir / "config.json").read_text())
    metrics = run_dir / "metrics.csv"
    if metrics.exists():
        out = run_dir / "losses.png"
        plot_losses(read_csv(metrics), out)
        made.append(out)
    dist = run_dir / "pi.csv"
    if dist.exists():
        rows = read_csv(dist)
        if rows:
            last = max(int(r["epoch"]) for r in rows)
            sel = [r for r in rows if int(r["epoch"]) == last]
            truth = _floats(sel, "true")
            out = run_dir / "distribution.png"
            plot_distribution(_floats(sel, "pi"), _floats(sel, "pi_tilde"), truth, out)
            made.append(out)
    report = run_dir / "report.json"
    if report.exists():
        rep = json.loads(report.read_text())
        base = run_dir / "report_stage1.json"
        baseline = None
        if base.exists() and base != report:
            baseline = json.loads(base.read_text())["class_accuracy"]
        sizes = json.loads((run_dir / "class_sizes.json").read_text())
        out = run_dir / "class_accuracy.png"
        plot_class_accuracy(rep["class_accuracy"], sizes, out, cfg["many_above"],
                            cfg["few_below"], baseline)
        made.append(out)
    weights = run_dir / "weights.csv"
    if weights.exists():
        rows = read_csv(weights)
        if rows:
            out = run_dir / "weights.png"
            plot_weights(rows, out)
            made.append(out)
    return made
