"""Point-annotated image datasets: on-disk JSON schema, validation,
near-duplicate discovery, and train/test splitting.

Annotation file schema (UTF-8 JSON):

    {"version": "1.0", "label_set": ["flower"],
     "images": [{"file": "img_0001.png", "width": 1024, "height": 768,
                 "points": [{"x": 412.0, "y": 233.5, "class": "flower"}]}]}

Image files are referenced relative to the annotation file. Unknown keys are
rejected in strict mode and warned about otherwise.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import SchemaError, ValidationError

SCHEMA_VERSION = "1.0"

_ROOT_KEYS = {"version", "label_set", "images"}
_IMAGE_KEYS = {"file", "width", "height", "points"}
_POINT_KEYS = {"x", "y", "class"}


@dataclass(frozen=True)
class PointAnnotation:
    """One object centroid: sub-pixel column/row coordinates plus class label."""

    x: float
    y: float
    class_label: str


@dataclass
class AnnotatedImage:
    """An image reference with its pixel size and centroid annotations."""

    image_path: Path
    width: int
    height: int
    points: list[PointAnnotation] = field(default_factory=list)

    def validate(self, label_set: set[str] | None = None, context: str = "") -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"{context}: non-positive image size "
                                  f"{self.width}x{self.height}")
        for i, p in enumerate(self.points):
            if not (0.0 <= p.x < self.width) or not (0.0 <= p.y < self.height):
                raise ValidationError(
                    f"{context}: point {i} at ({p.x}, {p.y}) outside "
                    f"[0, {self.width}) x [0, {self.height})"
                )
            if label_set is not None and p.class_label not in label_set:
                raise ValidationError(
                    f"{context}: point {i} has class {p.class_label!r} "
                    f"not in label set {sorted(label_set)}"
                )

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class DatasetSplit:
    """Disjoint train/test partition plus the validation crop size (W, H)."""

    train: list[AnnotatedImage]
    test: list[AnnotatedImage]
    validation_crop: tuple[int, int] = (768, 576)


def _check_keys(obj: dict, allowed: set[str], where: str, strict: bool) -> None:
    unknown = set(obj) - allowed
    if unknown:
        msg = f"{where}: unknown keys {sorted(unknown)}"
        if strict:
            raise SchemaError(msg)
        warnings.warn(msg, stacklevel=3)


def load_annotations(path: str | Path, strict: bool = True) -> list[AnnotatedImage]:
    """Load and validate an annotation file.

    Raises SchemaError with line/field context on malformed files and
    ValidationError naming the image and point index on out-of-bounds points.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read annotation file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: root must be an object")
    _check_keys(doc, _ROOT_KEYS, str(path), strict)
    for key in ("version", "label_set", "images"):
        if key not in doc:
            raise SchemaError(f"{path}: missing key {key!r}")
    if doc["version"] != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported version {doc['version']!r}")
    if not isinstance(doc["label_set"], list) or not all(
        isinstance(s, str) for s in doc["label_set"]
    ):
        raise SchemaError(f"{path}: label_set must be a list of strings")
    label_set = set(doc["label_set"])

    base = path.parent
    images: list[AnnotatedImage] = []
    for i, rec in enumerate(doc["images"]):
        where = f"{path}: images[{i}]"
        if not isinstance(rec, dict):
            raise SchemaError(f"{where}: must be an object")
        _check_keys(rec, _IMAGE_KEYS, where, strict)
        for key in ("file", "width", "height", "points"):
            if key not in rec:
                raise SchemaError(f"{where}: missing key {key!r}")
        if not isinstance(rec["width"], int) or not isinstance(rec["height"], int):
            raise SchemaError(f"{where}: width/height must be integers")
        points: list[PointAnnotation] = []
        for j, pt in enumerate(rec["points"]):
            pwhere = f"{where}.points[{j}]"
            if not isinstance(pt, dict):
                raise SchemaError(f"{pwhere}: must be an object")
            _check_keys(pt, _POINT_KEYS, pwhere, strict)
            for key in ("x", "y", "class"):
                if key not in pt:
                    raise SchemaError(f"{pwhere}: missing key {key!r}")
            if not isinstance(pt["x"], (int, float)) or not isinstance(pt["y"], (int, float)):
                raise SchemaError(f"{pwhere}: coordinates must be numbers")
            points.append(PointAnnotation(float(pt["x"]), float(pt["y"]), str(pt["class"])))
        image = AnnotatedImage(
            image_path=(base / rec["file"]).resolve(),
            width=rec["width"],
            height=rec["height"],
            points=points,
        )
        image.validate(label_set=label_set, context=f"{rec['file']} (images[{i}])")
        images.append(image)
    return images


def save_annotations(
    images: list[AnnotatedImage],
    path: str | Path,
    label_set: list[str] | None = None,
) -> None:
    """Write annotations in the on-disk schema; image paths become relative to
    the output file. Round-trips through load_annotations bit-exactly."""
    path = Path(path)
    if label_set is None:
        label_set = sorted({p.class_label for im in images for p in im.points})
    doc = {
        "version": SCHEMA_VERSION,
        "label_set": list(label_set),
        "images": [
            {
                "file": _relative_name(im.image_path, path.parent),
                "width": im.width,
                "height": im.height,
                "points": [
                    {"x": p.x, "y": p.y, "class": p.class_label} for p in im.points
                ],
            }
            for im in images
        ],
    }
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _relative_name(image_path: Path, base: Path) -> str:
    try:
        return image_path.resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        # image outside the annotation dir: fall back to os-style relpath
        import os

        return Path(os.path.relpath(image_path.resolve(), base.resolve())).as_posix()


def _load_grayscale(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def find_near_duplicates(
    images: list[AnnotatedImage], ssim_threshold: float = 0.95
) -> list[tuple[Path, Path]]:
    """All unordered pairs of images whose grayscale SSIM exceeds the threshold.

    Pairs are reported, not removed; shapes must match for a pair to be
    comparable (different-size images are never near-duplicates here).
    """
    from .metrics import ssim

    if not (0.0 < ssim_threshold <= 1.0):
        raise ValueError("ssim_threshold must be in (0, 1]")
    rasters = [_load_grayscale(im.image_path) for im in images]
    pairs: list[tuple[Path, Path]] = []
    for i in range(len(images)):
        for j in range(i + 1, len(images)):
            if rasters[i].shape != rasters[j].shape:
                continue
            if ssim(rasters[i], rasters[j], data_range=1.0) > ssim_threshold:
                a, b = sorted([images[i].image_path, images[j].image_path])
                pairs.append((a, b))
    return sorted(pairs)


def drop_duplicates(
    images: list[AnnotatedImage], pairs: list[tuple[Path, Path]]
) -> list[AnnotatedImage]:
    """Automated stand-in for manual duplicate review: for every reported pair
    keep the lexicographically first path and drop the other."""
    dropped = {max(a, b) for a, b in pairs}
    return [im for im in images if im.image_path not in dropped]


def split_dataset(
    images: list[AnnotatedImage],
    train_fraction: float = 0.75,
    seed: int = 0,
    validation_crop: tuple[int, int] = (768, 576),
) -> DatasetSplit:
    """Seeded, exhaustive, disjoint train/test partition.

    The train size is round(train_fraction * n), clamped so both sides are
    non-empty; identical seeds give identical splits.
    """
    if not (0.0 < train_fraction < 1.0):
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(images)
    if n < 2:
        raise ValueError(f"need at least 2 images to split, got {n}")
    n_train = int(n * train_fraction + 0.5)
    n_train = min(max(n_train, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    train = [images[i] for i in sorted(order[:n_train])]
    test = [images[i] for i in sorted(order[n_train:])]
    return DatasetSplit(train=train, test=test, validation_crop=validation_crop)
