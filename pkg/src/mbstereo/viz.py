"""Plot rendering for training logs and evaluation reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evalkit import REGIONS, validate_report


def _load_report(path) -> dict:
    path = Path(path)
    try:
        report = json.loads(path.read_text())
        validate_report(report)
    except Exception as exc:
        raise ValueError(f"malformed report {path}: {exc}") from exc
    return report


def plot_loss_curves(metrics_csv, out_path) -> Path:
    steps, cols = [], {"contrastive": [], "photometric": [], "smoothness": [], "total": []}
    with open(metrics_csv) as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            for k in cols:
                cols[k].append(float(row[k]))
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, v in cols.items():
        ax.plot(steps, v, label=k)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_region_bars(report_paths, out_path, metric: str = "outlier_rate") -> Path:
    """Grouped OCC/NOC/ALL bars, one group per report, in argument order."""
    reports = [_load_report(p) for p in report_paths]
    labels = [r["checkpoint_id"] for r in reports]
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(reports), 4))
    width = 0.25
    xs = np.arange(len(reports))
    for i, region in enumerate(REGIONS):
        vals = []
        for r in reports:
            row = next((x for x in r["rows"] if x["region"] == region), None)
            vals.append(row[metric] if row else np.nan)
        ax.bar(xs + (i - 1) * width, vals, width, label=region)
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel(f"{metric} (%)" if "rate" in metric else metric)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_heatmap_gallery(report_dir, out_path, max_frames: int = 8):
    """Per-frame |error| heatmaps; returns None with a notice when the
    report carries no heatmap data."""
    heat_dir = Path(report_dir) / "heatmaps"
    files = sorted(heat_dir.glob("*.npz")) if heat_dir.exists() else []
    if not files:
        print(f"no per-frame heatmaps under {report_dir}; gallery skipped")
        return None
    files = files[:max_frames]
    cols = min(4, len(files))
    rows = (len(files) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.0 * rows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, f in zip(axes.flat, files):
        err = np.load(f)["abs_error"]
        im = ax.imshow(err, cmap="magma", vmin=0, vmax=max(4.0, float(np.percentile(err, 99))))
        ax.set_title(f.stem, fontsize=7)
        ax.axis("off")
    fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.8)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)
