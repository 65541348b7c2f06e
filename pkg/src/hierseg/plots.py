"""Report visualization: per-class IoU bars with log-scale class sizes, and
training-loss curves from line-delimited logs."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricsReport


def plot_per_class_iou(
    reports: list[MetricsReport],
    names: list[str],
    out_dir: str | Path,
    stem: str = "per_class_iou",
) -> list[Path]:
    """One figure per level: grouped IoU bars per report, class point counts
    as a log-scale line on a twin axis. Reports must share a taxonomy."""
    if not reports:
        raise ValueError("no reports to plot")
    first = reports[0]
    for report in reports[1:]:
        if report.class_names != first.class_names:
            raise ValueError("reports use different taxonomies")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    paths = []
    num_levels = len(first.class_names)
    for level in range(num_levels):
        classes = first.class_names[level]
        x = np.arange(len(classes))
        width = 0.8 / len(reports)

        fig, ax = plt.subplots(figsize=(max(6.0, 0.7 * len(classes)), 4.0))
        for i, (report, name) in enumerate(zip(reports, names)):
            values = [
                0.0 if v is None else 100.0 * v for v in report.iou_per_class[level]
            ]
            ax.bar(x + (i - (len(reports) - 1) / 2) * width, values, width, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(classes, rotation=45, ha="right")
        ax.set_ylabel("IoU (%)")
        ax.set_ylim(0, 105)
        ax.set_title(f"Per-class IoU, level {level}")
        ax.legend(loc="upper right", fontsize="small")

        counts = first.truth_counts(level).astype(np.float64)
        twin = ax.twinx()
        twin.plot(x, np.maximum(counts, 1), color="black", marker="o", linewidth=1.2)
        twin.set_yscale("log")
        twin.set_ylabel("points (log scale)")

        fig.tight_layout()
        path = out_dir / f"{stem}_level{level}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_training_log(log_path: str | Path, out_dir: str | Path) -> Path:
    """Loss components over optimization steps from a train_log.jsonl file."""
    records = []
    with open(log_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    steps = [r for r in records if r.get("kind") == "step"]
    if not steps:
        raise ValueError(f"no step records in {log_path}")

    xs = np.arange(len(steps))
    total = [r["total"] for r in steps]
    ces = [sum(r["ces_per_h"]) for r in steps]
    chc = [r["chc"] for r in steps]
    aux = [sum(r["aux_per_h"]) for r in steps]

    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    ax.plot(xs, total, label="total")
    ax.plot(xs, ces, label="cross-entropy")
    ax.plot(xs, chc, label="consistency")
    ax.plot(xs, aux, label="auxiliary")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize="small")
    fig.tight_layout()

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "loss_curves.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
