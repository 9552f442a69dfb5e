"""Deterministic synthetic orchard-like scenes with point annotations.

Foreground objects are sharp shaded disks; background objects are drawn at
half brightness and blurred (the unannotated back-row analogue); occluder bars
cross the canvas over the foreground. Scenes are pure functions of
(seed, index), so datasets are reproducible bit-for-bit.

Annotated foreground centers keep a minimum mutual separation of
MIN_CENTER_SEPARATION pixels so density-map peaks stay individually
recoverable; placement failing after bounded retries raises GenerationError.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .annotations import AnnotatedImage, PointAnnotation, save_annotations
from .errors import GenerationError

MIN_CENTER_SEPARATION = 5.0
BACKGROUND_DIM = 0.5
BACKGROUND_BLUR = 2.0
_PLACEMENT_RETRIES = 500

LABEL = "fruit"

_BASE_COLOR = np.array([0.10, 0.22, 0.10])
_OBJECT_COLOR = np.array([0.78, 0.16, 0.12])
_OCCLUDER_COLOR = np.array([0.32, 0.24, 0.16])


@dataclass
class SceneConfig:
    """Scene recipe; all *_range tuples are inclusive (low, high)."""

    image_size: tuple[int, int] = (256, 192)
    n_objects: tuple[int, int] = (10, 30)
    object_radius: tuple[float, float] = (5.0, 9.0)
    n_background_objects: tuple[int, int] = (5, 15)
    n_occluders: tuple[int, int] = (1, 3)
    color_jitter: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_objects", "object_radius", "n_background_objects", "n_occluders"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range ({lo}, {hi}) is empty")
        if self.object_radius[0] < 2.0:
            raise ValueError("object radii must be >= 2 px")
        if self.image_size[0] <= 0 or self.image_size[1] <= 0:
            raise ValueError("image_size must be positive")


def _draw_disk(canvas: np.ndarray, x: float, y: float, radius: float, color: np.ndarray) -> None:
    height, width = canvas.shape[:2]
    x0, x1 = max(0, int(np.floor(x - radius))), min(width - 1, int(np.ceil(x + radius)))
    y0, y1 = max(0, int(np.floor(y - radius))), min(height - 1, int(np.ceil(y + radius)))
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    d2 = ((ys[:, None] - y) ** 2 + (xs[None, :] - x) ** 2) / (radius * radius)
    inside = d2 <= 1.0
    # radial shading, brightest at the center
    shade = np.clip(1.0 - 0.55 * d2, 0.0, 1.0)
    patch = canvas[y0 : y1 + 1, x0 : x1 + 1]
    patch[inside] = shade[inside, None] * color[None, :]


def _draw_bar(canvas: np.ndarray, p0: np.ndarray, direction: np.ndarray, half_width: float) -> None:
    height, width = canvas.shape[:2]
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    # distance from each pixel to the infinite line through p0 along direction
    normal = np.array([-direction[1], direction[0]])
    dist = np.abs((xs - p0[0]) * normal[0] + (ys - p0[1]) * normal[1])
    mask = dist <= half_width
    canvas[mask] = _OCCLUDER_COLOR


def _place_centers(
    rng: np.random.Generator, count: int, size: tuple[int, int], radius_range: tuple[float, float]
) -> tuple[list[tuple[float, float]], list[float]]:
    width, height = size
    centers: list[tuple[float, float]] = []
    radii: list[float] = []
    for _ in range(count):
        placed = False
        for _ in range(_PLACEMENT_RETRIES):
            r = float(rng.uniform(radius_range[0], radius_range[1]))
            margin = r + 1.0
            if width - 1 - margin <= margin or height - 1 - margin <= margin:
                continue
            x = float(rng.uniform(margin, width - 1 - margin))
            y = float(rng.uniform(margin, height - 1 - margin))
            if all(
                (x - cx) ** 2 + (y - cy) ** 2 >= MIN_CENTER_SEPARATION**2
                for cx, cy in centers
            ):
                centers.append((x, y))
                radii.append(r)
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place {count} objects with separation "
                f"{MIN_CENTER_SEPARATION} in a {width}x{height} scene"
            )
    return centers, radii


def generate_scene(cfg: SceneConfig, index: int) -> tuple[np.ndarray, AnnotatedImage]:
    """Render scene `index`: returns (uint8 HxWx3 image, annotations).

    The annotation list contains exactly the foreground centers; background
    objects and occluders are never annotated.
    """
    rng = np.random.default_rng([cfg.seed, index])
    width, height = cfg.image_size
    canvas = np.empty((height, width, 3), dtype=np.float64)
    canvas[:] = _BASE_COLOR
    canvas += 0.06 * gaussian_filter(rng.standard_normal((height, width, 1)), (3, 3, 0))

    n_bg = int(rng.integers(cfg.n_background_objects[0], cfg.n_background_objects[1] + 1))
    for _ in range(n_bg):
        r = float(rng.uniform(cfg.object_radius[0], cfg.object_radius[1]))
        x = float(rng.uniform(0, width - 1))
        y = float(rng.uniform(0, height - 1))
        jitter = 1.0 + cfg.color_jitter * float(rng.uniform(-1, 1))
        _draw_disk(canvas, x, y, r, _OBJECT_COLOR * BACKGROUND_DIM * jitter)
    canvas = gaussian_filter(canvas, (BACKGROUND_BLUR, BACKGROUND_BLUR, 0))

    n_fg = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    centers, radii = _place_centers(rng, n_fg, cfg.image_size, cfg.object_radius)
    for (x, y), r in zip(centers, radii):
        jitter = 1.0 + cfg.color_jitter * float(rng.uniform(-1, 1))
        _draw_disk(canvas, x, y, r, np.clip(_OBJECT_COLOR * jitter, 0.0, 1.0))

    n_occ = int(rng.integers(cfg.n_occluders[0], cfg.n_occluders[1] + 1))
    for _ in range(n_occ):
        if centers:
            through = centers[int(rng.integers(0, len(centers)))]
        else:
            through = (width / 2.0, height / 2.0)
        angle = float(rng.uniform(0, np.pi))
        direction = np.array([np.cos(angle), np.sin(angle)])
        _draw_bar(canvas, np.asarray(through, dtype=np.float64), direction, float(rng.uniform(1.0, 2.5)))

    image = (np.clip(canvas, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    annotated = AnnotatedImage(
        image_path=Path(f"scene_{index:04d}.png"),
        width=width,
        height=height,
        points=[PointAnnotation(x, y, LABEL) for x, y in centers],
    )
    return image, annotated


def generate_dataset(cfg: SceneConfig, n: int, out_dir: str | Path) -> Path:
    """Write n scenes plus one annotation file; returns the annotation path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images: list[AnnotatedImage] = []
    for index in range(n):
        raster, annotated = generate_scene(cfg, index)
        path = out_dir / annotated.image_path.name
        Image.fromarray(raster).save(path)
        annotated.image_path = path.resolve()
        images.append(annotated)
    ann_path = out_dir / "annotations.json"
    save_annotations(images, ann_path, label_set=[LABEL])
    return ann_path


def scene_config_from_json(path: str | Path) -> SceneConfig:
    """SceneConfig from a JSON object mirroring its fields."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    kwargs = {}
    for key in (
        "image_size",
        "n_objects",
        "object_radius",
        "n_background_objects",
        "n_occluders",
        "color_jitter",
        "seed",
    ):
        if key in doc:
            value = doc[key]
            kwargs[key] = tuple(value) if isinstance(value, list) else value
    return SceneConfig(**kwargs)
