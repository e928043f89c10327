import numpy as np
import pytest
import torch

import latentwarp as lw
from conftest import sample_codes


def test_tap_shapes(generator, mapping, model_cfg):
    w = sample_codes(mapping, 2)
    img, taps = generator(w)
    assert img.shape == (2, 3, model_cfg.image_size, model_cfg.image_size)
    for key, res in zip(lw.TAP_KEYS, model_cfg.tap_resolutions):
        assert taps[key].shape == (2, model_cfg.channels, res, res)
    assert img.min() >= -1 and img.max() <= 1


def test_synthesize_matches_forward(generator, mapping):
    w = sample_codes(mapping, 1)
    out = generator.synthesize(w[0])
    img, taps = generator(w)
    assert torch.equal(out.image, img[0])
    for k in lw.TAP_KEYS:
        assert torch.equal(out.taps[k], taps[k][0])


def test_zero_injection_is_identity_bits(generator, mapping):
    w = sample_codes(mapping, 1)
    plain = generator.synthesize(w[0])
    injected = generator.synthesize_with_injection(
        w[0], torch.zeros_like(plain.taps[lw.TAP_KEYS[-1]]))
    assert torch.equal(injected, plain.image)


def test_injection_changes_image(generator, mapping):
    w = sample_codes(mapping, 1)
    plain = generator.synthesize(w[0])
    f = torch.randn_like(plain.taps[lw.TAP_KEYS[-1]])
    injected = generator.synthesize_with_injection(w[0], f)
    assert not torch.equal(injected, plain.image)


def test_generator_frozen(generator):
    assert all(not p.requires_grad for p in generator.parameters())


def test_shift_direction_translates_image(generator, mapping, model_cfg):
    w = sample_codes(mapping, 1, seed=3)
    d = generator.attribute_direction("shift")
    strength = 0.8
    px = generator.shift_px(strength)
    assert px == pytest.approx(strength * 0.25 * (model_cfg.image_size - 1) / 2)
    base = generator.synthesize(w[0]).image
    edited = generator.synthesize(lw.apply_direction(w[0], d, strength)).image
    # resample the base image by the expected translation and compare interior
    flow = torch.zeros(2, model_cfg.image_size, model_cfg.image_size)
    flow[0] = px
    shifted = lw.warp(base, flow)  # shifted(p) = base(p + px * ex)
    # edited content moved right by px: edited(p) = base-content at p - px,
    # i.e. warping *edited* back by +px recovers base
    back = lw.warp(edited, flow)
    m = int(np.ceil(px)) + 2
    err = (back - base)[:, m:-m, m:-m].abs().mean().item()
    scale = base.abs().mean().item()
    assert err < 0.1 * scale


def test_blob_centers_shift_exactly(generator, mapping):
    w = sample_codes(mapping, 1, seed=4)[0]
    d = generator.attribute_direction("shift")
    strength = 0.6
    c0 = generator.blob_centers_px(w)
    c1 = generator.blob_centers_px(lw.apply_direction(w, d, strength))
    dx = c1[:, 0] - c0[:, 0]
    assert torch.allclose(dx, torch.full_like(dx, generator.shift_px(strength)),
                          atol=1e-4)
    assert torch.allclose(c1[:, 1], c0[:, 1], atol=1e-6)


def test_raise_direction_moves_one_blob_up(generator, mapping):
    from latentwarp.generator import RAISE_LAYER
    w = sample_codes(mapping, 1, seed=5)[0]
    d = generator.attribute_direction("raise")
    c0 = generator.blob_centers_px(w)
    c1 = generator.blob_centers_px(lw.apply_direction(w, d, 1.0))
    moved = (c1 - c0).abs().sum(dim=1) > 1e-6
    assert moved[RAISE_LAYER]
    assert moved.sum() == 1


def test_attribute_labels_follow_edits(generator, mapping):
    w = sample_codes(mapping, 1, seed=6)[0]
    d = generator.attribute_direction("raise")
    strongly_raised = lw.apply_direction(w, d, 50.0)
    assert generator.attribute_label(strongly_raised, "raised")
    strongly_lowered = lw.apply_direction(w, d, -50.0)
    assert not generator.attribute_label(strongly_lowered, "raised")


def test_discriminator_interfaces(discriminator, model_cfg):
    x = torch.randn(2, 3, model_cfg.image_size, model_cfg.image_size).clamp(-1, 1)
    score = discriminator(x)
    assert score.shape == (2,)
    assert torch.all((score > 0) & (score < 1))
    feats = discriminator.features(x)
    assert feats.shape == (2, 64)
    maps = discriminator.feature_maps(x)
    assert len(maps) == 3
    assert isinstance(discriminator.fingerprint(), str)
    # single-image paths
    assert discriminator(x[0]).ndim == 0
    assert discriminator.features(x[0]).shape == (64,)


def test_conv_substrate_contract(model_cfg, mapping):
    torch.manual_seed(0)
    gen = lw.ConvStyleGenerator(model_cfg)
    w = sample_codes(mapping, 2)
    img, taps = gen(w)
    assert img.shape == (2, 3, model_cfg.image_size, model_cfg.image_size)
    for key, res in zip(lw.TAP_KEYS, model_cfg.tap_resolutions):
        assert taps[key].shape == (2, model_cfg.channels, res, res)
    plain = gen.synthesize(w[0])
    injected = gen.synthesize_with_injection(
        w[0], torch.zeros_like(plain.taps[lw.TAP_KEYS[-1]]))
    assert torch.equal(injected, plain.image)


def test_generator_bundle_round_trip(tmp_path, model_cfg):
    out = tmp_path / "bundle.ckpt"
    mapping, gen, disc = lw.pretrain_toy_generator(model_cfg, out, disc_steps=5)
    cfg2, mapping2, gen2, disc2 = lw.load_generator_bundle(out)
    assert cfg2 == model_cfg
    z = torch.randn(2, model_cfg.z_dim, generator=torch.Generator().manual_seed(0))
    w = mapping(z)
    assert torch.equal(w, mapping2(z))
    img1, _ = gen(w)
    img2, _ = gen2(w)
    assert torch.equal(img1, img2)
    x = img1
    assert torch.equal(disc(x), disc2(x))


def test_bad_injection_shape(generator, mapping):
    w = sample_codes(mapping, 1)
    with pytest.raises(ValueError):
        generator(w, inject=torch.zeros(1, 3, 8, 8))
