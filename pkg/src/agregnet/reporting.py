"""Rendered result tables and overlay figures for evaluation runs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .localization import MatchResult
from .metrics import MetricsReport

_COLUMNS = ("PSNR", "SSIM", "MAE", "RMSE", "pMAE", "mAP", "mAR")


def _format_row(report: MetricsReport) -> list[str]:
    return [
        f"{report.psnr:.1f}",
        f"{report.ssim:.3f}",
        f"{report.mae:.1f}",
        f"{report.rmse:.1f}",
        f"{report.pmae:.1f}%",
        f"{report.map:.2f}",
        f"{report.mar:.2f}",
    ]


def render_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """Fixed-width text table, one row per labelled run."""
    header = ["Method", *_COLUMNS]
    body = [[label, *_format_row(rep)] for label, rep in rows]
    widths = [
        max(len(header[c]), *(len(r[c]) for r in body)) if body else len(header[c])
        for c in range(len(header))
    ]
    lines = []
    rule = "  ".join("-" * w for w in widths)
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append(rule)
    for row in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)


def _load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def density_overlay(image_path, density: np.ndarray, out_path) -> None:
    """Density heatmap drawn over the source image."""
    img = _load_rgb(image_path)
    fig, ax = plt.subplots(figsize=(img.shape[1] / 80, img.shape[0] / 80))
    ax.imshow(img)
    ax.imshow(np.clip(density, 0, None), cmap="jet", alpha=0.55)
    ax.set_axis_off()
    fig.tight_layout(pad=0)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def localization_overlay(
    image_path,
    gt_points,
    pred_points,
    match: MatchResult,
    threshold: float,
    out_path,
) -> None:
    """Centroid classification figure.

    Red: ground truth; blue: true-positive predictions (matched within the
    threshold); yellow: false-positive predictions; magenta: false-negative
    ground truths; cyan lines connect ground truths to their true positives.
    """
    img = _load_rgb(image_path)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 2)
    fig, ax = plt.subplots(figsize=(img.shape[1] / 80, img.shape[0] / 80))
    ax.imshow(img)
    tp_pred, fp_pred = set(), set(range(len(pred)))
    fn_gt = set(match.unmatched_gt)
    for gi, pj, dist in match.pairs:
        if dist <= threshold:
            tp_pred.add(pj)
            fp_pred.discard(pj)
            ax.plot([gt[gi, 0], pred[pj, 0]], [gt[gi, 1], pred[pj, 1]], color="cyan", lw=1.0)
        else:
            fn_gt.add(gi)
    fp_pred -= tp_pred
    if len(gt):
        ax.scatter(gt[:, 0], gt[:, 1], s=14, c="red", label="ground truth")
    if tp_pred:
        idx = sorted(tp_pred)
        ax.scatter(pred[idx, 0], pred[idx, 1], s=14, c="blue", label="true positive")
    if fp_pred:
        idx = sorted(fp_pred)
        ax.scatter(pred[idx, 0], pred[idx, 1], s=14, c="yellow", label="false positive")
    if fn_gt:
        idx = sorted(fn_gt)
        ax.scatter(gt[idx, 0], gt[idx, 1], s=18, c="magenta", marker="x", label="false negative")
    ax.legend(loc="lower right", fontsize=7)
    ax.set_axis_off()
    fig.tight_layout(pad=0)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def count_scatter(gt_counts, pred_counts, out_path) -> None:
    """Predicted vs ground-truth counts with the identity line."""
    gt = np.asarray(gt_counts, dtype=np.float64)
    pred = np.asarray(pred_counts, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(gt, pred, s=16)
    top = max(1.0, gt.max() if gt.size else 1.0, pred.max() if pred.size else 1.0) * 1.05
    ax.plot([0, top], [0, top], color="gray", lw=1, ls="--")
    ax.set_xlabel("ground-truth count")
    ax.set_ylabel("predicted count")
    ax.set_xlim(0, top)
    ax.set_ylim(0, top)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def save_table(rows: list[tuple[str, MetricsReport]], path: str | Path) -> str:
    text = render_table(rows)
    Path(path).write_text(text + "\n", encoding="utf-8")
    return text
