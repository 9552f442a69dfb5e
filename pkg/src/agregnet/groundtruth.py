"""Supervision rasters from point annotations.

Density map: each centroid contributes an isotropic Gaussian whose standard
deviation adapts to the distance to its nearest annotated neighbor. Every
kernel is truncated at +/- ceil(4*sigma) pixels, clipped at the image border,
and divided by its own discrete sum, so each object contributes exactly unit
mass and the map total equals the object count.

Segmentation map: binary union of disks of radius 2*sigma around the same
centroids, tested against integer pixel centers with sub-pixel coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .annotations import AnnotatedImage, PointAnnotation


@dataclass
class SigmaPolicy:
    """Adaptive kernel-width rule: sigma = max(min_sigma, ratio * nearest
    neighbor distance); a lone point gets fallback_sigma."""

    ratio: float = 0.15
    fallback_sigma: float = 8.0
    min_sigma: float = 1.0

    def __post_init__(self) -> None:
        if self.ratio <= 0 or self.fallback_sigma <= 0 or self.min_sigma <= 0:
            raise ValueError("sigma policy fields must be positive")


@dataclass
class DensityMap:
    """Non-negative float32 raster summing to the object count, plus the
    per-centroid sigmas (aligned with the source points) it was built from."""

    data: np.ndarray
    sigmas: list[float]

    @property
    def count(self) -> float:
        return float(self.data.sum())


@dataclass
class SegmentationMap:
    """Binary uint8 raster marking disk neighborhoods of the centroids."""

    data: np.ndarray


def compute_adaptive_sigmas(
    points: list[PointAnnotation], policy: SigmaPolicy
) -> list[float]:
    """Per-point Gaussian widths from nearest-neighbor distances (k-d tree)."""
    if len(points) == 0:
        return []
    if len(points) == 1:
        return [policy.fallback_sigma]
    coords = np.asarray([(p.x, p.y) for p in points], dtype=np.float64)
    tree = cKDTree(coords)
    # k=2: the first neighbor is the point itself at distance 0
    dists, _ = tree.query(coords, k=2)
    nearest = dists[:, 1]
    return [max(policy.min_sigma, policy.ratio * float(d)) for d in nearest]


def _add_kernel(out: np.ndarray, x: float, y: float, sigma: float) -> None:
    height, width = out.shape
    radius = math.ceil(4.0 * sigma)
    cx, cy = int(round(x)), int(round(y))
    x0, x1 = max(0, cx - radius), min(width - 1, cx + radius)
    y0, y1 = max(0, cy - radius), min(height - 1, cy + radius)
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    gx = np.exp(-((xs - x) ** 2) / (2.0 * sigma * sigma))
    gy = np.exp(-((ys - y) ** 2) / (2.0 * sigma * sigma))
    kernel = np.outer(gy, gx)
    total = kernel.sum()
    if total <= 0.0:
        # degenerate support: put the whole unit mass on the rounded pixel
        out[min(max(cy, 0), height - 1), min(max(cx, 0), width - 1)] += 1.0
        return
    out[y0 : y1 + 1, x0 : x1 + 1] += kernel / total


def make_density_map(image: AnnotatedImage, policy: SigmaPolicy | None = None) -> DensityMap:
    """Superpose one unit-mass Gaussian per annotated centroid."""
    if policy is None:
        policy = SigmaPolicy()
    image.validate(context=str(image.image_path))
    sigmas = compute_adaptive_sigmas(image.points, policy)
    out = np.zeros((image.height, image.width), dtype=np.float64)
    for p, sigma in zip(image.points, sigmas):
        _add_kernel(out, p.x, p.y, sigma)
    return DensityMap(data=out.astype(np.float32), sigmas=sigmas)


def make_segmentation_map(image: AnnotatedImage, sigmas: list[float]) -> SegmentationMap:
    """Binary union of disks of radius 2*sigma_f around each centroid."""
    if len(sigmas) != len(image.points):
        raise ValueError(
            f"got {len(sigmas)} sigmas for {len(image.points)} points"
        )
    out = np.zeros((image.height, image.width), dtype=np.uint8)
    for p, sigma in zip(image.points, sigmas):
        r = 2.0 * sigma
        x0 = max(0, math.ceil(p.x - r))
        x1 = min(image.width - 1, math.floor(p.x + r))
        y0 = max(0, math.ceil(p.y - r))
        y1 = min(image.height - 1, math.floor(p.y + r))
        if x0 > x1 or y0 > y1:
            continue
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        dist2 = (ys[:, None] - p.y) ** 2 + (xs[None, :] - p.x) ** 2
        out[y0 : y1 + 1, x0 : x1 + 1] |= (dist2 <= r * r).astype(np.uint8)
    return SegmentationMap(data=out)


def make_ground_truth(
    image: AnnotatedImage, policy: SigmaPolicy | None = None
) -> tuple[DensityMap, SegmentationMap]:
    """Both supervision rasters for one image, sharing the same sigma list."""
    density = make_density_map(image, policy)
    segmentation = make_segmentation_map(image, density.sigmas)
    return density, segmentation
