import numpy as np
import pytest
import torch

import latentwarp as lw
from latentwarp.data import render_detail_blobs, sample_detail_blobs
from conftest import sample_codes


def test_sampler_shapes(sampler, rng, model_cfg):
    imgs, w, details = sampler.sample(rng, 3)
    assert imgs.shape == (3, 3, model_cfg.image_size, model_cfg.image_size)
    assert w.shape == (3, model_cfg.latent_layers, model_cfg.latent_dim)
    assert len(details) == 3
    assert imgs.min() >= -1 and imgs.max() <= 1


def test_detail_blobs_translate_exactly(train_cfg, rng):
    blobs = sample_detail_blobs(rng, train_cfg.data, 64)
    base = render_detail_blobs(blobs, 64)
    moved = render_detail_blobs(blobs, 64, offset_px=(5.0, -3.0))
    # moved content at (x, y) equals base content at (x-5, y+3)
    assert torch.allclose(moved[:, 10:50, 10:50], base[:, 13:53, 5:45], atol=1e-5)


def test_compose_matches_sample(sampler, rng):
    imgs, w, details = sampler.sample(rng, 2)
    recomposed = sampler.compose(w[0], details[0])
    assert torch.allclose(recomposed, imgs[0], atol=1e-5)


def test_run_pass_no_edit_shapes(pipeline, sampler, rng, model_cfg):
    imgs, _, _ = sampler.sample(rng, 2)
    res = pipeline.run_pass(imgs, None, want_flow_gt=True)
    S, C = model_cfg.image_size, model_cfg.channels
    assert res.image_out.shape == (2, 3, S, S)
    assert res.f_a.shape == (2, C, S, S)
    assert res.f.shape == (2, C, S, S)
    # no-edit pass: flow prediction skipped (identity warp), zero flow
    # target, edited taps alias unedited taps
    assert res.flow_pred is None
    assert torch.equal(res.f_wa, res.f_a)
    assert torch.all(res.flow_gt == 0)
    assert res.img_e is res.img_g

    forced = pipeline.run_pass(imgs, None, force_flow=True)
    assert forced.flow_pred.shape == (2, 2, S, S)


def test_run_pass_edit_generates_flow_gt(pipeline, sampler, rng):
    imgs, _, _ = sampler.sample(rng, 1)
    w_r = sample_codes(pipeline.mapping, 1, seed=17)

    def edit_fn(w):
        return w + 0.45 * (w_r - w)

    res = pipeline.run_pass(imgs, edit_fn, want_flow_gt=True)
    assert res.flow_gt is not None
    assert not torch.equal(res.img_e, res.img_g)


def test_run_pass_teacher_forced_warp_uses_oracle(pipeline, sampler, rng):
    from latentwarp.flowwarp import warp

    imgs, _, _ = sampler.sample(rng, 1)
    w_r = sample_codes(pipeline.mapping, 1, seed=23)

    def edit_fn(w):
        return w + 0.45 * (w_r - w)

    res = pipeline.run_pass(imgs, edit_fn, warp_with_oracle=True)
    # oracle field computed even without want_flow_gt, and used for the warp
    assert res.flow_gt is not None
    assert res.flow_pred is not None
    assert torch.equal(res.f_wa, warp(res.f_a, res.flow_gt))


def test_reconstruct_deterministic(pipeline, sampler, rng):
    imgs, _, _ = sampler.sample(rng, 1)
    a = pipeline.reconstruct(imgs[0])
    b = pipeline.reconstruct(imgs[0])
    assert torch.equal(a, b)


def test_edit_strength_zero_equals_invert(pipeline, sampler, rng):
    imgs, _, _ = sampler.sample(rng, 1)
    d = pipeline.generator.attribute_direction("shift")
    edited = pipeline.edit_image(imgs[0], d, 0.0)
    inverted = pipeline.reconstruct(imgs[0])
    assert torch.equal(edited, inverted)


def test_no_warp_pipeline_skips_flow(model_cfg, mapping, generator,
                                     discriminator, base_encoder, sampler, rng):
    pipe = lw.build_pipeline(model_cfg, mapping, generator, discriminator,
                             base_encoder, warp_enabled=False)
    assert "flow" not in pipe.trainable_modules()
    imgs, _, _ = sampler.sample(rng, 1)
    res = pipe.run_pass(imgs, None)
    assert res.flow_pred is None
    assert torch.equal(res.f_wa, res.f_a)


def test_pipeline_save_load_round_trip(tmp_path, pipeline, sampler, rng):
    path = tmp_path / "pipe.ckpt"
    lw.save_pipeline(path, pipeline)
    loaded = lw.load_pipeline(path)
    imgs, _, _ = sampler.sample(rng, 1)
    assert torch.equal(loaded.reconstruct(imgs[0]), pipeline.reconstruct(imgs[0]))
    assert loaded.warp_enabled == pipeline.warp_enabled


def test_frozen_vs_trainable_split(pipeline):
    for mod in (pipeline.mapping, pipeline.generator, pipeline.e0):
        assert all(not p.requires_grad for p in mod.parameters())
    for mod in pipeline.trainable_modules().values():
        assert all(p.requires_grad for p in mod.parameters())
