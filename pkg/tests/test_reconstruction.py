from __future__ import annotations

import io
import json
import logging

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from PIL import Image
from torch import nn

from conftest import smooth_image, write_images
from reconalign.accounting import macs_for_layer
from reconalign.errors import ReconstructionError
from reconalign.imaging import load_rgb
from reconalign.manifest import Label, merge_manifests, verify_manifest
from reconalign.reconstruction import (
    AutoencoderHandle,
    LdmAutoencoderKL,
    LdmConfig,
    SavePolicy,
    ToyAutoencoderConfig,
    identity_handle,
    load_external_autoencoder,
    reconstruct,
    reconstruct_dataset,
    reconstruct_tensor,
    save_toy_autoencoder,
    train_toy_autoencoder,
)
from reconalign.textures import generate_dataset


class Pool(nn.Module):
    """Average-pool encoder, nearest decoder: a lossy f-factor autoencoder with known shapes."""

    def __init__(self, f: int):
        super().__init__()
        self.f = f
        self.seen: list[tuple[int, ...]] = []

    def encode(self, x):
        self.seen.append(tuple(x.shape))
        return nn.functional.avg_pool2d(x, self.f)

    def decode(self, z):
        return nn.functional.interpolate(z, scale_factor=self.f, mode="nearest")


def pool_handle(f: int) -> AutoencoderHandle:
    return AutoencoderHandle(f"pool{f}", Pool(f), f, 3)


@pytest.fixture(scope="module")
def textures(tmp_path_factory):
    return generate_dataset(24, 64, tmp_path_factory.mktemp("tex"), seed=7)


@pytest.fixture(scope="module")
def toy(textures):
    cfg = ToyAutoencoderConfig(epochs=1, batch_size=8, crop=32, widths=(8, 16, 16), seed=3)
    return train_toy_autoencoder(cfg, textures)


def test_multiple_of_f_takes_no_padding():
    ae = pool_handle(8)
    x = np.zeros((512, 512, 3), np.uint8)
    assert reconstruct(ae, x).shape == x.shape
    assert ae.module.seen[-1] == (1, 3, 512, 512)


def test_non_multiple_is_padded_then_cropped(rng):
    ae = pool_handle(8)
    x = smooth_image(rng, 640, 427)
    y = reconstruct(ae, x)
    assert ae.module.seen[-1] == (1, 3, 432, 640)
    assert y.shape == (427, 640, 3)


class Recorder(nn.Module):
    def encode(self, x):
        self.last = x.clone()
        return x

    def decode(self, z):
        return z


def test_padding_reflects_the_border():
    ae = AutoencoderHandle("rec", Recorder(), 4, 3)
    x = torch.rand(1, 3, 6, 5)
    out = reconstruct_tensor(ae, x)
    assert torch.equal(out, x)
    p = ae.module.last
    assert p.shape[-2:] == (8, 8)
    # row 6 mirrors row 4 and column 5 mirrors column 3, without repeating the edge
    assert torch.equal(p[..., 6, :5], x[..., 4, :])
    assert torch.equal(p[..., :6, 5], x[..., :, 3])


@given(w=st.integers(8, 70), h=st.integers(8, 70), f=st.sampled_from([1, 2, 4, 8]))
def test_dimensions_preserved(w, h, f):
    x = np.random.default_rng(w * h).integers(0, 256, (h, w, 3), dtype=np.uint8)
    assert reconstruct(pool_handle(f), x).shape == x.shape


def test_side_below_f_is_fatal():
    with pytest.raises(ReconstructionError, match="smaller than the downsample factor"):
        reconstruct(pool_handle(8), np.zeros((5, 20, 3), np.uint8))


def test_identity_is_exact(rng):
    x = smooth_image(rng, 13, 9)
    assert np.array_equal(reconstruct(identity_handle(), x), x)


def test_bad_factor_rejected():
    with pytest.raises(ReconstructionError):
        AutoencoderHandle("x", Pool(3), 3, 3)


def test_toy_is_not_identity_and_deterministic(toy, textures):
    diffs = []
    for r in textures.records[:12]:
        x = load_rgb(textures.path_of(r))
        y = reconstruct(toy, x)
        assert np.array_equal(y, reconstruct(toy, x))
        diffs.append(np.abs(y.astype(int) - x).mean())
    assert np.mean(diffs) > 0


def test_toy_training_is_deterministic(textures, toy):
    cfg = ToyAutoencoderConfig(epochs=1, batch_size=8, crop=32, widths=(8, 16, 16), seed=3)
    again = train_toy_autoencoder(cfg, textures)
    for a, b in zip(toy.module.state_dict().values(), again.module.state_dict().values()):
        assert torch.equal(a, b)


def test_zero_epochs_gives_warning_and_noisy_output(textures):
    h = train_toy_autoencoder(ToyAutoencoderConfig(epochs=0, crop=32, widths=(8, 16, 16)), textures)
    assert h.warning is not None
    x = load_rgb(textures.path_of(textures.records[0]))
    assert np.abs(reconstruct(h, x).astype(int) - x).mean() > 20


def test_toy_config_validation():
    with pytest.raises(ReconstructionError):
        ToyAutoencoderConfig(f=2)
    with pytest.raises(ReconstructionError):
        ToyAutoencoderConfig(f=8, widths=(8, 8))
    assert ToyAutoencoderConfig(f=8, widths=(8, 8, 8, 8)).stages == 3


def test_toy_save_load_roundtrip(toy, tmp_path, rng):
    p = save_toy_autoencoder(toy, tmp_path / "ae.pt")
    back = load_external_autoencoder(f"toy:{p}")
    x = smooth_image(rng, 36, 28)
    assert back.identity == toy.identity
    assert np.array_equal(reconstruct(back, x), reconstruct(toy, x))


def test_unresolvable_specs():
    for spec in ("nothing", "toy:/no/such/file", "ldm:/no/such.ckpt", "identity:x"):
        with pytest.raises(ReconstructionError):
            load_external_autoencoder(spec)


def test_ldm_handle_factor_and_latent(tmp_path):
    cfg = LdmConfig(ch=8, ch_mult=(1, 1, 2, 2), num_res_blocks=1, norm_groups=4)
    torch.manual_seed(0)
    model = LdmAutoencoderKL(cfg)
    # a full diffusion checkpoint carries the autoencoder under a prefix
    sd = {f"first_stage_model.{k}": v for k, v in model.state_dict().items()}
    sd["model.diffusion.weight"] = torch.zeros(1)
    torch.save({"state_dict": sd}, tmp_path / "m.ckpt")
    (tmp_path / "m.json").write_text(json.dumps(cfg.to_json()))
    h = load_external_autoencoder(f"ldm:{tmp_path / 'm.ckpt'}")
    assert (h.downsample_factor, h.latent_channels) == (8, 4)
    z = h.encode(torch.rand(1, 3, 512, 512))
    assert tuple(z.shape) == (1, 4, 64, 64)
    x = np.random.default_rng(0).integers(0, 256, (40, 56, 3), dtype=np.uint8)
    a, b = reconstruct(h, x), reconstruct(h, x)
    assert a.shape == x.shape and a.tobytes() == b.tobytes()


def test_ldm_bad_weights(tmp_path):
    torch.save({"nope": torch.zeros(1)}, tmp_path / "w.pt")
    with pytest.raises(ReconstructionError):
        load_external_autoencoder(f"ldm:{tmp_path / 'w.pt'}")


def test_dataset_structure(small_reals, tmp_path):
    fakes = reconstruct_dataset(pool_handle(4), small_reals, tmp_path / "fakes", "match", seed=1)
    assert len(fakes) == 3 and all(r.label == Label.FAKE for r in fakes.records)
    both = merge_manifests(small_reals, fakes)
    assert both.is_paired() and verify_manifest(both) == []
    for real, fake in both.pairs():
        assert real.dims == fake.dims and fake.container_format == "png"
    meta = fakes.meta["reconstruction"]
    assert meta["autoencoder"] == "pool4" and meta["seed"] == 1


def test_dataset_rejects_fakes(small_reals, tmp_path):
    fakes = reconstruct_dataset(identity_handle(), small_reals, tmp_path / "f")
    with pytest.raises(ReconstructionError):
        reconstruct_dataset(identity_handle(), fakes, tmp_path / "g")


def _jpeg_tables(q: int):
    buf = io.BytesIO()
    Image.new("RGB", (16, 16)).save(buf, "JPEG", quality=q)
    return Image.open(io.BytesIO(buf.getvalue())).quantization


def test_jpeg_save_qualities_in_range_and_reproducible(textures, toy, tmp_path):
    sub = textures.with_records(textures.records[:10])
    a = reconstruct_dataset(toy, sub, tmp_path / "a", "jpeg:70-100", seed=5)
    b = reconstruct_dataset(toy, sub, tmp_path / "b", "jpeg:70-100", seed=5)
    assert [r.content_hash for r in a.records] == [r.content_hash for r in b.records]
    tables = {q: _jpeg_tables(q) for q in range(1, 101)}
    qs = a.meta["reconstruction"]["save_qualities"]
    for r in a.records:
        assert r.container_format == "jpeg"
        found = Image.open(a.path_of(r)).quantization
        matching = [q for q, t in tables.items() if t == found]
        assert qs[r.pair_id] in matching and 70 <= qs[r.pair_id] <= 100


def test_reported_macs_equal_per_image_sum(small_reals, tmp_path, toy):
    fakes = reconstruct_dataset(toy, small_reals, tmp_path / "f")
    expected = 0
    for r in small_reals.records:
        enc, dec = toy.cost(r.width_px, r.height_px)
        expected += sum(macs_for_layer(l) for l in enc.layers) + sum(macs_for_layer(l) for l in dec.layers)
    assert fakes.meta["reconstruction"]["macs"]["total"] == expected > 0


def test_failures_above_limit_are_fatal(small_reals, tmp_path, caplog):
    (small_reals.path_of(small_reals.records[0])).unlink()
    with caplog.at_level(logging.WARNING), pytest.raises(ReconstructionError, match="failed"):
        reconstruct_dataset(identity_handle(), small_reals, tmp_path / "f")


def test_save_policy_parse():
    assert SavePolicy.parse("jpeg:70-100") == SavePolicy("jpeg", (70, 100))
    assert str(SavePolicy.parse("match")) == "match:70-100"
    for bad in ("gif", "jpeg:abc", "jpeg:90-80"):
        with pytest.raises(ReconstructionError):
            SavePolicy.parse(bad)
