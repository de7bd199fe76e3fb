from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn

from conftest import write_images
from reconalign.augmentation import AugmentationPolicy
from reconalign.detector import (
    BackboneConfig,
    DetectorCheckpoint,
    TrainConfig,
    build_detector,
    compose_batch,
    lr_drops,
    train,
    validate,
)
from reconalign.errors import DetectorError, TrainingError
from reconalign.manifest import Label, ingest_directory, merge_manifests
from reconalign.reconstruction import identity_handle, reconstruct_dataset

SMALL = BackboneConfig(widths=(4, 8))


@pytest.fixture(scope="module")
def pairs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pairs")
    reals = write_images(root / "reals", [(40, 40)] * 6 + [(48, 36)] * 2, seed=3)
    fakes = reconstruct_dataset(identity_handle(), reals, root / "fakes")
    return merge_manifests(reals, fakes)


class Constant(nn.Module):
    def __init__(self, p: float):
        super().__init__()
        self.logit = math.log(p / (1 - p))

    def forward(self, x):
        return torch.full((x.shape[0],), self.logit)


class Oracle(nn.Module):
    """Separates the set because fakes are brighter."""

    def forward(self, x):
        return (x.mean(dim=(1, 2, 3)) - 0.5) * 100


def test_random_init_is_deterministic():
    a, b = build_detector(SMALL, seed=4), build_detector(SMALL, seed=4)
    for u, v in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(u, v)
    c = build_detector(SMALL, seed=5)
    assert not torch.equal(a.backbone.fc.weight, c.backbone.fc.weight)


@pytest.mark.parametrize("side", [96, 512])
def test_single_logit_for_any_side(side):
    det = build_detector(BackboneConfig(), seed=0).eval()
    with torch.no_grad():
        assert det(torch.rand(1, 3, side, side)).shape == (1,)


def test_resnet_stem_keeps_resolution():
    det = build_detector(BackboneConfig(family="resnet50-like"), seed=0).eval()
    seen = {}
    det.backbone.layer1.register_forward_hook(lambda m, i, o: seen.update(layer1=o.shape))
    with torch.no_grad():
        out = det(torch.rand(1, 3, 32, 32))
    assert out.shape == (1,) and seen["layer1"][-2:] == (32, 32)
    plain = build_detector(BackboneConfig(family="resnet50-like", stem_downsampling_removed=False), seed=0)
    assert plain.backbone.conv1.stride == (2, 2)
    assert sum(p.numel() for p in det.parameters()) == sum(p.numel() for p in plain.parameters())


def test_small_cnn_stem_flag():
    on = build_detector(BackboneConfig(widths=(4, 8)))
    off = build_detector(BackboneConfig(widths=(4, 8), stem_downsampling_removed=False))
    assert on.backbone.features[0].stride == (1, 1) and off.backbone.features[0].stride == (2, 2)


def test_bad_backbone_configs(tmp_path):
    with pytest.raises(DetectorError):
        BackboneConfig(family="vgg")
    with pytest.raises(DetectorError):
        BackboneConfig(init="imagenet21k")
    with pytest.raises(DetectorError):
        build_detector(BackboneConfig(init=f"external:{tmp_path / 'missing.pt'}"))


def test_external_init_loads_backbone(tmp_path):
    src = build_detector(SMALL, seed=11)
    torch.save(src.backbone.state_dict(), tmp_path / "w.pt")
    det = build_detector(BackboneConfig(widths=(4, 8), init=f"external:{tmp_path / 'w.pt'}"), seed=0)
    assert torch.equal(det.backbone.features[0].weight, src.backbone.features[0].weight)


def test_sync_batch_of_four(pairs):
    b = compose_batch(pairs, "sync", AugmentationPolicy(rrc_side=32, train_crop_side=24), 4,
                      np.random.default_rng(0))
    assert b.x.shape == (4, 3, 24, 24)
    assert b.y.tolist() == [0.0, 1.0, 0.0, 1.0]
    assert b.params[0] == b.params[1] and b.params[2] == b.params[3]
    assert len({repr(p) for p in b.params}) == 2
    ids = pairs.by_id()
    assert ids[b.ids[1]].pair_id == b.ids[0] and ids[b.ids[3]].pair_id == b.ids[2]


def test_random_batch_params_are_independent(pairs):
    pol = AugmentationPolicy(rrc_side=32, train_crop_side=24)
    rng = np.random.default_rng(1)
    for _ in range(3):
        b = compose_batch(pairs, "random", pol, 128, rng)
        assert len({repr(p) for p in b.params}) >= 127
        assert set(b.y.tolist()) <= {0.0, 1.0}


def test_sync_needs_pairs(small_reals):
    with pytest.raises(TrainingError):
        compose_batch(small_reals, "sync", AugmentationPolicy(rrc_side=32, train_crop_side=24), 4,
                      np.random.default_rng(0))
    with pytest.raises(TrainingError):
        TrainConfig(batch_size=5, composer="sync")
    with pytest.raises(TrainingError):
        TrainConfig(composer="shuffle")


def test_validate_hand_counts(pairs):
    assert validate(Constant(0.7), pairs) == 0.5
    assert validate(Constant(0.3), pairs) == 0.5
    with pytest.raises(TrainingError):
        validate(Constant(0.5), pairs.with_records(()))


def test_oracle_on_separable_set(tmp_path):
    for name, level in (("d", 10), ("b", 240)):
        (tmp_path / name).mkdir()
        for i in range(3):
            Image.new("RGB", (32, 32), (level,) * 3).save(tmp_path / name / f"{i}.png")
    m = merge_manifests(ingest_directory(tmp_path / "d", "real", "d"), ingest_directory(tmp_path / "b", "fake", "b"))
    assert validate(Oracle(), m) == 1.0


def _cfg(**kw):
    base = dict(batch_size=4, train_crop_side=24, lr=1e-4, seed=0,
                policy=AugmentationPolicy(rrc_side=32, train_crop_side=24))
    base.update(kw)
    return TrainConfig(**base)


def test_frozen_validator_gives_two_drops_and_thirty_epochs(pairs):
    det = build_detector(SMALL, seed=0)
    ck = train(det, pairs, pairs, _cfg(), validator=lambda m: 0.5)
    lrs = [h["lr"] for h in ck.history[1:]]
    assert len(lrs) == 30
    assert lr_drops(ck.history) == 2
    assert sorted(set(lrs), reverse=True) == pytest.approx([1e-4, 1e-5, 1e-6])
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert ck.best_epoch == 0


def test_improvement_resets_the_window(pairs):
    # accuracy rises by exactly the threshold every 5 epochs, so the lr never drops
    calls = iter(range(10**6))
    det = build_detector(SMALL, seed=0)
    ck = train(det, pairs, pairs, _cfg(max_epochs=25), validator=lambda m: 0.5 + 0.001 * (next(calls) // 5))
    assert lr_drops(ck.history) == 0 and len(ck.history) == 26


def test_sub_threshold_gains_do_not_count(pairs):
    calls = iter(range(10**6))
    det = build_detector(SMALL, seed=0)
    ck = train(det, pairs, pairs, _cfg(max_epochs=40), validator=lambda m: 0.5 + 0.0004 * next(calls))
    # 0.04% per epoch: the threshold is crossed every third epoch, never a 10-epoch stall
    assert lr_drops(ck.history) == 0
    ck2 = train(build_detector(SMALL, seed=0), pairs, pairs, _cfg(max_epochs=40),
                validator=lambda m, it=iter(range(10**6)): 0.5 + 0.00001 * next(it))
    assert lr_drops(ck2.history) == 2


def test_best_epoch_earliest_on_ties(pairs):
    seq = iter([0.5, 0.6, 0.7, 0.7, 0.65] + [0.6] * 100)
    ck = train(build_detector(SMALL, seed=0), pairs, pairs, _cfg(max_epochs=6), validator=lambda m: next(seq))
    assert ck.best_epoch == 2


def test_training_is_deterministic_and_checkpoint_roundtrips(pairs, tmp_path):
    cfg = _cfg(max_epochs=2)
    a = train(build_detector(SMALL, seed=1), pairs, pairs, cfg)
    b = train(build_detector(SMALL, seed=1), pairs, pairs, cfg)
    assert a.history == b.history
    for u, v in zip(a.model.state_dict().values(), b.model.state_dict().values()):
        assert torch.equal(u, v)
    a.set_threshold(0.3)
    back = DetectorCheckpoint.load(a.save(tmp_path / "ck"))
    assert back.threshold == 0.3 and back.history == a.history and back.best_epoch == a.best_epoch
    x = torch.rand(2, 3, 40, 40)
    with torch.no_grad():
        assert torch.equal(back.model(x), a.model.eval()(x))


def test_threshold_must_be_open_interval(pairs):
    ck = train(build_detector(SMALL), pairs, pairs, _cfg(max_epochs=1), validator=lambda m: 0.5)
    for t in (0.0, 1.0, 1.5):
        with pytest.raises(DetectorError):
            ck.set_threshold(t)


def test_validation_needs_both_labels(pairs):
    reals = pairs.with_records([r for r in pairs.records if r.label == Label.REAL])
    with pytest.raises(TrainingError):
        train(build_detector(SMALL), pairs, reals, _cfg())


def test_non_finite_loss_is_fatal(pairs):
    det = build_detector(SMALL)
    with torch.no_grad():
        det.backbone.fc.bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        train(det, pairs, pairs, _cfg(), validator=lambda m: 0.5)
