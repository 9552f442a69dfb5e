"""Loss functions and the optimization loop.

Total loss is the density MSE plus alpha times the Dice segmentation loss
(1 - Dice coefficient); the Dice term is skipped entirely when the model has
no segmentation branch. The learning rate follows a closed-form exponential
schedule, lr(e) = learning_rate * lr_decay_per_epoch ** e, assigned at each
epoch boundary.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .annotations import AnnotatedImage, DatasetSplit, PointAnnotation
from .errors import ConfigError, TrainingDivergedError
from .groundtruth import SigmaPolicy, make_ground_truth
from .localization import count_from_density
from .metrics import ssim
from .network import AgRegNet, ModelOutput

# input images are scaled to [0, 1] then standardized with these constants
INPUT_MEAN = 0.5
INPUT_STD = 0.5


@dataclass
class LossConfig:
    alpha: float = 0.01
    dice_smooth: float = 1e-6

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.dice_smooth <= 0:
            raise ConfigError("dice_smooth must be positive")


@dataclass
class TrainConfig:
    learning_rate: float = 0.0004
    lr_decay_per_epoch: float = 0.995
    max_epochs: int = 200
    batch_size: int = 2
    train_size: tuple[int, int] = (1024, 768)
    val_crop: tuple[int, int] = (768, 576)
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.max_epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("learning_rate, max_epochs, batch_size must be positive")
        if not (0.0 < self.lr_decay_per_epoch <= 1.0):
            raise ConfigError("lr_decay_per_epoch must be in (0, 1]")
        for w, h in (self.train_size, self.val_crop):
            if w <= 0 or h <= 0:
                raise ConfigError("sizes must be positive")
            if w % 8 != 0 or h % 8 != 0:
                raise ConfigError(f"size {w}x{h} must be divisible by 8")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_mae: float
    val_ssim: float


@dataclass
class TrainResult:
    model: AgRegNet
    history: list[EpochRecord]
    best_epoch: int
    best_val_mae: float


@dataclass
class _Sample:
    image: Tensor          # (3, H, W), standardized
    density: Tensor        # (1, H, W)
    segmentation: Tensor   # (1, H, W)
    count: float


def _as_float_tensor(value) -> Tensor:
    t = torch.as_tensor(value)
    return t if t.is_floating_point() else t.to(torch.get_default_dtype())


def dice_coefficient(pred_seg, gt_seg, smooth: float = 1e-6) -> Tensor:
    """D = (2*sum(p*g) + s) / (sum(p^2) + sum(g^2) + s); loss is 1 - D."""
    p = _as_float_tensor(pred_seg)
    g = _as_float_tensor(gt_seg).to(p.dtype)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
    inter = (p * g).sum()
    denom = (p * p).sum() + (g * g).sum()
    return (2.0 * inter + smooth) / (denom + smooth)


def mse_loss(pred_den, gt_den) -> Tensor:
    """Mean of squared per-pixel differences."""
    p = _as_float_tensor(pred_den)
    g = _as_float_tensor(gt_den).to(p.dtype)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
    return ((p - g) ** 2).mean()


def total_loss(pred: ModelOutput, gt_den, gt_seg, cfg: LossConfig | None = None) -> Tensor:
    """Density MSE plus alpha * Dice loss; MSE alone without a segmentation head."""
    if cfg is None:
        cfg = LossConfig()
    loss = mse_loss(pred.density, gt_den)
    if pred.segmentation is not None:
        loss = loss + cfg.alpha * (1.0 - dice_coefficient(pred.segmentation, gt_seg, cfg.dice_smooth))
    return loss


def learning_rate_at(epoch: int, tcfg: TrainConfig) -> float:
    return tcfg.learning_rate * tcfg.lr_decay_per_epoch ** epoch


def load_image_tensor(path, size: tuple[int, int] | None = None) -> Tensor:
    """RGB image as a standardized (3, H, W) float tensor, optionally resized
    to (width, height)."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != tuple(size):
            im = im.resize(tuple(size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    arr = (arr - INPUT_MEAN) / INPUT_STD
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def _resize_annotations(image: AnnotatedImage, size: tuple[int, int]) -> AnnotatedImage:
    wn, hn = size
    sx, sy = wn / image.width, hn / image.height
    points = [
        PointAnnotation(
            min(p.x * sx, wn - 1e-3), min(p.y * sy, hn - 1e-3), p.class_label
        )
        for p in image.points
    ]
    return AnnotatedImage(image.image_path, wn, hn, points)


def _prepare_sample(image: AnnotatedImage, size: tuple[int, int], policy: SigmaPolicy) -> _Sample:
    scaled = _resize_annotations(image, size)
    density, segmentation = make_ground_truth(scaled, policy)
    return _Sample(
        image=load_image_tensor(image.image_path, size),
        density=torch.from_numpy(density.data).unsqueeze(0),
        segmentation=torch.from_numpy(segmentation.data.astype(np.float32)).unsqueeze(0),
        count=float(len(image.points)),
    )


def _effective_crop(crop: tuple[int, int], size: tuple[int, int]) -> tuple[int, int]:
    w = min(crop[0], size[0]) // 8 * 8
    h = min(crop[1], size[1]) // 8 * 8
    return max(w, 8), max(h, 8)


def _make_val_samples(
    images: list[AnnotatedImage],
    crop: tuple[int, int],
    size: tuple[int, int],
    policy: SigmaPolicy,
    seed: int,
) -> list[_Sample]:
    """Seeded random crops of the test images, fixed once per run."""
    rng = np.random.default_rng(seed + 1)
    cw, ch = _effective_crop(crop, size)
    samples = []
    for image in images:
        scaled = _resize_annotations(image, size)
        x0 = int(rng.integers(0, size[0] - cw + 1))
        y0 = int(rng.integers(0, size[1] - ch + 1))
        points = [
            PointAnnotation(p.x - x0, p.y - y0, p.class_label)
            for p in scaled.points
            if x0 <= p.x < x0 + cw and y0 <= p.y < y0 + ch
        ]
        cropped = AnnotatedImage(image.image_path, cw, ch, points)
        density, segmentation = make_ground_truth(cropped, policy)
        full = load_image_tensor(image.image_path, size)
        samples.append(
            _Sample(
                image=full[:, y0 : y0 + ch, x0 : x0 + cw].contiguous(),
                density=torch.from_numpy(density.data).unsqueeze(0),
                segmentation=torch.from_numpy(segmentation.data.astype(np.float32)).unsqueeze(0),
                count=float(len(points)),
            )
        )
    return samples


def _validate(model: AgRegNet, samples: list[_Sample]) -> tuple[float, float]:
    if not samples:
        return math.nan, math.nan
    model.eval()
    maes, ssims = [], []
    with torch.no_grad():
        for s in samples:
            pred = model(s.image.unsqueeze(0)).density[0, 0].numpy()
            maes.append(abs(count_from_density(pred) - s.count))
            gt = s.density[0].numpy()
            rng = float(gt.max()) or 1.0
            ssims.append(ssim(gt, pred, data_range=rng))
    return float(np.mean(maes)), float(np.mean(ssims))


def train(
    model: AgRegNet,
    split: DatasetSplit,
    tcfg: TrainConfig | None = None,
    lcfg: LossConfig | None = None,
    sigma_policy: SigmaPolicy | None = None,
    augment=None,
) -> TrainResult:
    """Adam training with per-epoch exponential LR decay.

    Ground-truth maps are generated once up front for every training image
    (resized to tcfg.train_size); validation samples are seeded random crops
    of the test images at split.validation_crop, fixed for the whole run. The
    model state with the best validation MAE is restored before returning.
    """
    if tcfg is None:
        tcfg = TrainConfig()
    if lcfg is None:
        lcfg = LossConfig()
    if sigma_policy is None:
        sigma_policy = SigmaPolicy()
    if not split.train:
        raise ConfigError("training set is empty")

    torch.manual_seed(tcfg.seed)
    samples = [_prepare_sample(im, tcfg.train_size, sigma_policy) for im in split.train]
    val_samples = _make_val_samples(
        split.test, split.validation_crop, tcfg.train_size, sigma_policy, tcfg.seed
    )
    optimizer = torch.optim.Adam(
        model.parameters(), lr=tcfg.learning_rate, betas=tcfg.adam_betas
    )
    rng = np.random.default_rng(tcfg.seed)
    history: list[EpochRecord] = []
    best_mae = math.inf
    best_epoch = -1
    best_state = None

    for epoch in range(tcfg.max_epochs):
        lr = learning_rate_at(epoch, tcfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        order = rng.permutation(len(samples))
        epoch_losses = []
        for start in range(0, len(order), tcfg.batch_size):
            batch = [samples[i] for i in order[start : start + tcfg.batch_size]]
            if augment is not None:
                batch = [augment(s) for s in batch]
            images = torch.stack([s.image for s in batch])
            gt_den = torch.stack([s.density for s in batch])
            gt_seg = torch.stack([s.segmentation for s in batch])
            out = model(images)
            mse_part = mse_loss(out.density, gt_den)
            if out.segmentation is not None:
                dice = dice_coefficient(out.segmentation, gt_seg, lcfg.dice_smooth)
                loss = mse_part + lcfg.alpha * (1.0 - dice)
            else:
                dice = None
                loss = mse_part
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // tcfg.batch_size}: "
                    f"mse={mse_part.item()}, "
                    f"dice={'n/a' if dice is None else dice.item()}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.item()))
        val_mae, val_ssim = _validate(model, val_samples)
        history.append(
            EpochRecord(epoch, lr, float(np.mean(epoch_losses)), val_mae, val_ssim)
        )
        if not math.isnan(val_mae) and val_mae < best_mae:
            best_mae = val_mae
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = len(history) - 1
        best_mae = math.nan
    return TrainResult(model=model, history=history, best_epoch=best_epoch, best_val_mae=best_mae)


def write_history_csv(history: list[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "val_mae", "val_ssim"])
        for rec in history:
            writer.writerow([rec.epoch, rec.lr, rec.train_loss, rec.val_mae, rec.val_ssim])
