"""Evaluation measures: SSIM/PSNR for map quality, MAE/RMSE/pMAE for counts,
and distance-threshold-swept precision/recall (AP/AR -> mAP/mAR) for localization.

SSIM convention used throughout: 7x7 uniform window, k1=0.01, k2=0.03 on the
supplied (or inferred) data range, unbiased covariance, mean over fully valid
windows. PSNR of identical rasters returns the documented cap PSNR_CAP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .localization import MatchResult, count_from_density

# dB reported when the two rasters are identical (MSE == 0)
PSNR_CAP = 100.0

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class PerImageRecord:
    name: str
    gt_count: float
    pred_count: float
    ssim: float
    psnr: float
    ap: float
    ar: float


@dataclass
class MetricsReport:
    """Aggregate metrics for one dataset split."""

    psnr: float
    ssim: float
    mae: float
    rmse: float
    pmae: float
    map: float
    mar: float
    per_image: list[PerImageRecord] = field(default_factory=list)


def ssim(a: np.ndarray, b: np.ndarray, data_range: float | None = None) -> float:
    """Mean structural similarity between two equal-shape rasters.

    data_range defaults to the joint max minus joint min of both inputs;
    two identical rasters score exactly 1.0 regardless of range.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("ssim expects 2-D rasters")
    win = SSIM_WINDOW
    if min(a.shape) < win:
        raise ValueError(f"rasters must be at least {win}x{win}, got {a.shape}")
    if data_range is None:
        data_range = float(max(a.max(), b.max()) - min(a.min(), b.min()))
        if data_range == 0.0:
            return 1.0
    if data_range <= 0:
        raise ValueError("data_range must be positive")

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    mu_a = uniform_filter(a, size=win)
    mu_b = uniform_filter(b, size=win)
    # unbiased (sample) variance/covariance over each window
    n = win * win
    corr = n / (n - 1)
    var_a = corr * (uniform_filter(a * a, size=win) - mu_a * mu_a)
    var_b = corr * (uniform_filter(b * b, size=win) - mu_b * mu_b)
    cov = corr * (uniform_filter(a * b, size=win) - mu_a * mu_b)

    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    pad = win // 2
    return float(s[pad:-pad, pad:-pad].mean())


def psnr(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs return PSNR_CAP."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range * data_range / mse))


def count_errors(gt_counts, pred_counts) -> tuple[float, float, float]:
    """MAE, RMSE and percentage MAE (100 * MAE / mean ground-truth count)."""
    gt = np.asarray(gt_counts, dtype=np.float64)
    pred = np.asarray(pred_counts, dtype=np.float64)
    if gt.size == 0 or gt.shape != pred.shape:
        raise ValueError("count lists must be equal-length and non-empty")
    err = np.abs(pred - gt)
    mae = float(err.mean())
    rmse = float(np.sqrt((err * err).mean()))
    mean_gt = float(gt.mean())
    if mean_gt == 0.0:
        raise ValueError("pMAE undefined: mean ground-truth count is zero")
    return mae, rmse, 100.0 * mae / mean_gt


def threshold_grid(sigmas) -> list[int]:
    """Per-image cutoff grid: integer thresholds from ceil(mean sigma) to
    floor(2.2 * mean sigma); a single ceil(mean sigma) if that range is empty."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas.size == 0:
        raise ValueError("threshold grid needs at least one sigma")
    mean = float(sigmas.mean())
    lo = math.ceil(mean)
    hi = math.floor(2.2 * mean)
    if hi < lo:
        return [lo]
    return list(range(lo, hi + 1))


def ap_ar_sweep(match: MatchResult, sigmas, sweep: list[int] | None = None) -> tuple[float, float]:
    """Average precision/recall of a one-to-one centroid matching over a
    cutoff-distance sweep.

    At each threshold T: a matched pair with distance <= T is a true positive;
    a pair beyond T counts as both a false positive (its prediction) and a
    false negative (its ground truth); unmatched predictions are false
    positives and unmatched ground truths false negatives. With no predictions
    precision is 1 by convention; with no ground truths recall is 1.
    """
    if sweep is None:
        sweep = threshold_grid(sigmas)
    if len(sweep) == 0:
        raise ValueError("empty threshold sweep")
    n_gt = len(match.pairs) + len(match.unmatched_gt)
    n_pred = len(match.pairs) + len(match.unmatched_pred)
    distances = np.asarray([d for _, _, d in match.pairs], dtype=np.float64)
    precisions = []
    recalls = []
    for t in sweep:
        tp = int((distances <= t).sum()) if distances.size else 0
        precisions.append(tp / n_pred if n_pred > 0 else 1.0)
        recalls.append(tp / n_gt if n_gt > 0 else 1.0)
    return float(np.mean(precisions)), float(np.mean(recalls))


def evaluate_image(
    name: str,
    pred_density: np.ndarray,
    gt_density: np.ndarray,
    gt_count: float,
    match: MatchResult,
    sigmas,
) -> PerImageRecord:
    """Per-image record combining map quality, count, and localization scores."""
    rng = float(gt_density.max())
    if rng <= 0:
        rng = 1.0
    ap, ar = ap_ar_sweep(match, sigmas)
    return PerImageRecord(
        name=name,
        gt_count=float(gt_count),
        pred_count=count_from_density(pred_density),
        ssim=ssim(gt_density, pred_density, data_range=rng),
        psnr=psnr(gt_density, pred_density, data_range=rng),
        ap=ap,
        ar=ar,
    )


def aggregate_report(records: list[PerImageRecord]) -> MetricsReport:
    """Dataset-level report: count errors over images, means of the rest."""
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    mae, rmse, pmae = count_errors(
        [r.gt_count for r in records], [r.pred_count for r in records]
    )
    return MetricsReport(
        psnr=float(np.mean([r.psnr for r in records])),
        ssim=float(np.mean([r.ssim for r in records])),
        mae=mae,
        rmse=rmse,
        pmae=pmae,
        map=float(np.mean([r.ap for r in records])),
        mar=float(np.mean([r.ar for r in records])),
        per_image=records,
    )
