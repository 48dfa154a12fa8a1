"""Figures and delimited summaries for a finished run.

The eval CSV is the machine-readable artifact (one row per split, mean
PSNR/SSIM); the PNG figures next to it are the human-readable view: loss
curve, render-vs-reference grid, and per-view metric bars.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .trainer import evaluate_cloud

EVAL_COLUMNS = ("scene", "split", "psnr", "ssim")


def write_eval_csv(path, scene, split_rows):
    """One row per split with mean metrics.

    ``split_rows`` maps split name -> list of (cam_id, psnr, ssim).
    Float formatting is repr, so identical runs write identical bytes.
    """
    lines = [",".join(EVAL_COLUMNS)]
    for split in sorted(split_rows):
        rows = split_rows[split]
        if not rows:
            continue
        mean_psnr = float(np.mean([r[1] for r in rows]))
        mean_ssim = float(np.mean([r[2] for r in rows]))
        lines.append(f"{scene},{split},{mean_psnr!r},{mean_ssim!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def loss_curve_figure(log, path):
    """Loss vs iteration, one trace per supervision kind."""
    fig, ax = plt.subplots(figsize=(7, 4))
    kinds = sorted({row[1] for row in log.rows})
    for kind in kinds:
        pts = [(it, loss) for it, k, loss in log.rows if k == kind]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], ".", markersize=3,
                alpha=0.6, label=kind)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def view_grid_figure(cloud, records, background, path, max_views=5):
    """Reference (top) against render (bottom) for up to max_views views."""
    from .rasterizer import render
    from .tensor import F32, no_grad

    records = records[:max_views]
    background = np.asarray(background, dtype=F32)
    fig, axes = plt.subplots(2, max(len(records), 1), figsize=(2.2 * len(records), 4.6),
                             squeeze=False)
    with no_grad():
        for col, rec in enumerate(records):
            ref = rec.clean if rec.clean is not None else rec.image
            img, _ = render(cloud, rec.camera, background)
            axes[0][col].imshow(np.clip(ref, 0, 1).transpose(1, 2, 0))
            axes[0][col].set_title(rec.camera.cam_id, fontsize=8)
            axes[1][col].imshow(np.clip(img.data, 0, 1).transpose(1, 2, 0))
            for row in (0, 1):
                axes[row][col].set_xticks(())
                axes[row][col].set_yticks(())
    axes[0][0].set_ylabel("reference")
    axes[1][0].set_ylabel("render")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def metric_bar_figure(split_rows, path):
    """Per-view PSNR bars, grouped by split."""
    fig, ax = plt.subplots(figsize=(7, 4))
    labels, values, colors = [], [], []
    palette = {"train": "tab:blue", "test": "tab:orange"}
    for split in sorted(split_rows):
        for cam_id, view_psnr, _ in split_rows[split]:
            labels.append(cam_id)
            values.append(view_psnr)
            colors.append(palette.get(split, "tab:gray"))
    x = np.arange(len(labels))
    ax.bar(x, values, color=colors)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=60, fontsize=7)
    ax.set_ylabel("PSNR (dB)")
    ax.set_title("per-view PSNR")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_report(out_dir, scene, cloud, dataset, log=None):
    """Evaluate both splits, write eval.csv plus figures; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_rows = {
        "train": evaluate_cloud(cloud, dataset.train, dataset.background),
        "test": evaluate_cloud(cloud, dataset.test, dataset.background),
    }
    paths = {"eval_csv": out / "eval.csv",
             "metrics": out / "metrics.png",
             "views": out / "views.png"}
    write_eval_csv(paths["eval_csv"], scene, split_rows)
    metric_bar_figure(split_rows, paths["metrics"])
    view_grid_figure(cloud, dataset.test, dataset.background, paths["views"])
    if log is not None and log.rows:
        paths["loss_curve"] = out / "loss_curve.png"
        loss_curve_figure(log, paths["loss_curve"])
    return paths
