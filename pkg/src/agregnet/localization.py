"""Post-processing of density maps: counting, peak extraction, and one-to-one
association of predicted peaks with ground-truth centroids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.optimize import linear_sum_assignment


@dataclass
class MatchResult:
    """Minimum-total-distance one-to-one association between ground-truth and
    predicted centroids; leftovers on either side are reported unmatched."""

    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_gt: list[int] = field(default_factory=list)
    unmatched_pred: list[int] = field(default_factory=list)

    @property
    def total_cost(self) -> float:
        return float(sum(d for _, _, d in self.pairs))


@dataclass
class LocalizeParams:
    """Peak-extraction knobs: Chebyshev separation between reported peaks and
    an absolute intensity floor suppressing noise maxima."""

    min_distance: int = 2
    min_intensity: float = 0.0


def suggested_min_intensity(sigmas, fraction: float = 0.05) -> float:
    """Intensity floor as a fraction of the peak of a typical unit-mass kernel,
    1 / (2*pi*sigma_bar^2) with sigma_bar the mean of the supplied sigmas."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas.size == 0:
        raise ValueError("need at least one sigma")
    sigma_bar = float(sigmas.mean())
    return fraction / (2.0 * math.pi * sigma_bar * sigma_bar)


def count_from_density(density: np.ndarray) -> float:
    """Object count: sum of pixel values with negatives clamped to zero."""
    density = np.asarray(density, dtype=np.float64)
    return float(np.clip(density, 0.0, None).sum())


def detect_peaks(
    density: np.ndarray, min_distance: int = 2, min_intensity: float = 0.0
) -> list[tuple[int, int]]:
    """Local maxima of a raster as (x, y) pixel coordinates.

    No two returned peaks lie within min_distance of each other in the
    Chebyshev metric, every peak has intensity >= min_intensity, and ties are
    broken deterministically: higher intensity first, then (row, column) order.
    """
    if min_distance < 1:
        raise ValueError("min_distance must be >= 1")
    density = np.asarray(density, dtype=np.float64)
    size = 2 * min_distance + 1
    local_max = maximum_filter(density, size=size, mode="nearest")
    rows, cols = np.nonzero((density == local_max) & (density >= min_intensity))
    if rows.size == 0:
        return []
    values = density[rows, cols]
    # stable order: intensity descending, then row, then column
    order = np.lexsort((cols, rows, -values))
    rows, cols = rows[order], cols[order]
    accepted_r: list[int] = []
    accepted_c: list[int] = []
    for r, c in zip(rows, cols):
        ok = True
        for ar, ac in zip(accepted_r, accepted_c):
            if max(abs(int(r) - ar), abs(int(c) - ac)) <= min_distance:
                ok = False
                break
        if ok:
            accepted_r.append(int(r))
            accepted_c.append(int(c))
    return [(c, r) for r, c in zip(accepted_r, accepted_c)]


def match_peaks(gt_peaks, pred_peaks) -> MatchResult:
    """Hungarian one-to-one matching of size min(N, M) under Euclidean cost."""
    gt = np.asarray(gt_peaks, dtype=np.float64).reshape(-1, 2)
    pred = np.asarray(pred_peaks, dtype=np.float64).reshape(-1, 2)
    n, m = len(gt), len(pred)
    if n == 0 or m == 0:
        return MatchResult(
            pairs=[],
            unmatched_gt=list(range(n)),
            unmatched_pred=list(range(m)),
        )
    cost = np.linalg.norm(gt[:, None, :] - pred[None, :, :], axis=2)
    gi, pj = linear_sum_assignment(cost)
    pairs = [(int(i), int(j), float(cost[i, j])) for i, j in zip(gi, pj)]
    matched_gt = {i for i, _, _ in pairs}
    matched_pred = {j for _, j, _ in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_gt=[i for i in range(n) if i not in matched_gt],
        unmatched_pred=[j for j in range(m) if j not in matched_pred],
    )


def localize(density: np.ndarray, gt_peaks, params: LocalizeParams | None = None) -> MatchResult:
    """Extract peaks from a density map and associate them with ground truth."""
    if params is None:
        params = LocalizeParams()
    pred = detect_peaks(density, params.min_distance, params.min_intensity)
    return match_peaks(gt_peaks, pred)
