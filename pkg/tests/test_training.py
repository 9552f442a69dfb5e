import csv
import math

import numpy as np
import pytest
import torch

from agregnet.annotations import DatasetSplit, load_annotations
from agregnet.errors import ConfigError, TrainingDivergedError
from agregnet.network import ModelOutput, NetworkConfig, build_model
from agregnet.synthdata import SceneConfig, generate_dataset
from agregnet.training import (
    LossConfig,
    TrainConfig,
    dice_coefficient,
    learning_rate_at,
    mse_loss,
    total_loss,
    train,
    write_history_csv,
)

TOY = NetworkConfig(stage_channels=[8, 16, 32, 64, 128])


# --- dice -----------------------------------------------------------------


def test_dice_perfect_overlap():
    g = torch.zeros(8, 8)
    g[2:4, 2:4] = 1.0
    assert float(dice_coefficient(g, g)) == pytest.approx(1.0, abs=1e-5)


def test_dice_disjoint_supports():
    p = torch.zeros(8, 8)
    g = torch.zeros(8, 8)
    p[0, 0] = 1.0
    g[7, 7] = 1.0
    assert float(dice_coefficient(p, g)) == pytest.approx(0.0, abs=1e-5)


def test_dice_derived_value():
    g = torch.zeros(4, 4)
    g[0, :] = 1.0  # 4 ones
    p = g * 0.5
    # (2 * 2) / (1 + 4) = 0.8
    assert float(dice_coefficient(p, g)) == pytest.approx(0.8, abs=1e-6)


def test_dice_symmetric_for_binary():
    rng = np.random.default_rng(0)
    p = (rng.random((10, 10)) > 0.5).astype(np.float32)
    g = (rng.random((10, 10)) > 0.5).astype(np.float32)
    assert float(dice_coefficient(p, g)) == pytest.approx(float(dice_coefficient(g, p)), abs=1e-12)


def test_dice_loss_bounds():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = rng.random((6, 6)).astype(np.float32)
        g = (rng.random((6, 6)) > 0.5).astype(np.float32)
        d = float(dice_coefficient(p, g))
        assert 0.0 <= 1.0 - d <= 1.0


def test_dice_empty_masks_no_nan():
    z = torch.zeros(4, 4)
    assert float(dice_coefficient(z, z)) == pytest.approx(1.0)


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice_coefficient(torch.zeros(2, 2), torch.zeros(3, 3))


# --- mse ------------------------------------------------------------------


def test_mse_zero_for_equal():
    a = torch.rand(5, 5)
    assert float(mse_loss(a, a)) == 0.0


def test_mse_constant_offset():
    a = torch.rand(5, 5)
    assert float(mse_loss(a + 2.0, a)) == pytest.approx(4.0, rel=1e-6)


def test_mse_derived_2x2():
    gt = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    pred = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    assert float(mse_loss(pred, gt)) == pytest.approx(0.5)


# --- total loss -----------------------------------------------------------


def test_total_loss_perfect_prediction():
    den = torch.rand(1, 8, 8)
    seg = torch.zeros(1, 8, 8)
    seg[0, 2:5, 2:5] = 1.0
    out = ModelOutput(density=den, segmentation=seg)
    assert float(total_loss(out, den, seg)) == pytest.approx(0.0, abs=1e-5)


def test_total_loss_alpha_zero_equals_mse():
    den = torch.rand(1, 6, 6)
    seg = torch.rand(1, 6, 6)
    gt_den = torch.rand(1, 6, 6)
    gt_seg = (torch.rand(1, 6, 6) > 0.5).float()
    out = ModelOutput(density=den, segmentation=seg)
    cfg = LossConfig(alpha=0.0)
    assert float(total_loss(out, gt_den, gt_seg, cfg)) == float(mse_loss(den, gt_den))


def test_total_loss_derived_value():
    # mse = 0.5 from the 2x2 case, dice = 0.8 from the 4-ones case
    gt_den = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    pred_den = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    gt_seg = torch.zeros(4, 4)
    gt_seg[0, :] = 1.0
    pred_seg = gt_seg * 0.5
    out = ModelOutput(density=pred_den, segmentation=pred_seg)
    value = float(total_loss(out, gt_den, gt_seg, LossConfig(alpha=0.01)))
    assert value == pytest.approx(0.502, abs=1e-6)


def test_total_loss_without_seg_branch():
    den = torch.rand(1, 4, 4)
    gt = torch.rand(1, 4, 4)
    out = ModelOutput(density=den, segmentation=None)
    assert float(total_loss(out, gt, None)) == float(mse_loss(den, gt))


# --- lr schedule ----------------------------------------------------------


def test_lr_schedule_closed_form():
    tcfg = TrainConfig()
    assert learning_rate_at(0, tcfg) == 0.0004
    assert learning_rate_at(200, tcfg) == pytest.approx(0.0004 * 0.995**200, abs=1e-18)
    assert learning_rate_at(200, tcfg) == pytest.approx(1.468e-4, rel=1e-3)
    for e in range(50):
        ratio = learning_rate_at(e + 1, tcfg) / learning_rate_at(e, tcfg)
        assert ratio == pytest.approx(0.995, abs=1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ConfigError):
        TrainConfig(lr_decay_per_epoch=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(train_size=(100, 96))  # 100 not divisible by 8
    with pytest.raises(ConfigError):
        LossConfig(alpha=-0.1)


# --- training loop --------------------------------------------------------


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenes")
    cfg = SceneConfig(image_size=(64, 64), n_objects=(3, 6), n_occluders=(0, 1), seed=5)
    ann = generate_dataset(cfg, 6, out)
    return load_annotations(ann)


def _split(images):
    return DatasetSplit(train=images[:4], test=images[4:], validation_crop=(32, 32))


def _tcfg(**kw):
    base = dict(
        learning_rate=1e-3,
        max_epochs=2,
        batch_size=2,
        train_size=(64, 64),
        val_crop=(32, 32),
        seed=3,
    )
    base.update(kw)
    return TrainConfig(**base)


def test_train_empty_set_rejected(small_dataset):
    split = DatasetSplit(train=[], test=small_dataset, validation_crop=(32, 32))
    model = build_model(TOY)
    with pytest.raises(ConfigError):
        train(model, split, _tcfg(), LossConfig())


def test_train_records_history_and_schedule(small_dataset):
    torch.manual_seed(0)
    model = build_model(TOY)
    result = train(model, _split(small_dataset), _tcfg(max_epochs=3), LossConfig())
    assert len(result.history) == 3
    for rec in result.history:
        assert rec.lr == 1e-3 * 0.995**rec.epoch
        assert math.isfinite(rec.train_loss)
        assert math.isfinite(rec.val_mae)
    assert 0 <= result.best_epoch < 3


def test_train_deterministic_first_epoch(small_dataset):
    losses = []
    for _ in range(2):
        torch.manual_seed(11)
        model = build_model(TOY)
        result = train(model, _split(small_dataset), _tcfg(max_epochs=1), LossConfig())
        losses.append(result.history[0].train_loss)
    assert losses[0] == losses[1]


def test_single_image_overfit_smoke(tmp_path):
    # loss after 200 single-image iterations drops at least 10x from the start
    cfg = SceneConfig(
        image_size=(96, 96), n_objects=(3, 3), object_radius=(7.0, 9.0),
        n_occluders=(0, 0), seed=5,
    )
    images = load_annotations(generate_dataset(cfg, 1, tmp_path))
    torch.manual_seed(2)
    model = build_model(TOY)
    split = DatasetSplit(train=images, test=[], validation_crop=(32, 32))
    tcfg = _tcfg(
        max_epochs=200, batch_size=1, learning_rate=1e-3, seed=2, train_size=(96, 96)
    )
    result = train(model, split, tcfg, LossConfig())
    first = result.history[0].train_loss
    last = result.history[-1].train_loss
    assert last <= first / 10.0
    # monotone-ish trajectory: the tail improves on the early phase
    assert np.mean([r.train_loss for r in result.history[-20:]]) < np.mean(
        [r.train_loss for r in result.history[:20]]
    )


def test_train_divergence_detected(small_dataset):
    torch.manual_seed(4)
    model = build_model(TOY)
    with torch.no_grad():
        next(model.parameters()).fill_(float("nan"))
    with pytest.raises(TrainingDivergedError, match="epoch 0"):
        train(model, _split(small_dataset), _tcfg(max_epochs=1), LossConfig())


def test_augment_hook_called(small_dataset):
    seen = []

    def hook(sample):
        seen.append(1)
        return sample

    torch.manual_seed(0)
    model = build_model(TOY)
    train(model, _split(small_dataset), _tcfg(max_epochs=1), LossConfig(), augment=hook)
    assert len(seen) == 4  # one call per training sample per epoch


def test_history_csv_roundtrip(tmp_path, small_dataset):
    torch.manual_seed(1)
    model = build_model(TOY)
    result = train(model, _split(small_dataset), _tcfg(max_epochs=2), LossConfig())
    path = tmp_path / "history.csv"
    write_history_csv(result.history, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert [r["epoch"] for r in rows] == ["0", "1"]
    for rec, row in zip(result.history, rows):
        assert float(row["lr"]) == rec.lr
        assert float(row["train_loss"]) == rec.train_loss
