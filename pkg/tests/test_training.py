import copy
import dataclasses as dc
import json

import numpy as np
import pytest
import torch

import latentwarp as lw
from latentwarp.training import PathKind, Trainer
from conftest import sample_codes


def _fresh_pipe(model_cfg, mapping, generator, discriminator, base_encoder,
                warp=True):
    return lw.build_pipeline(model_cfg, mapping, generator,
                             copy.deepcopy(discriminator), base_encoder,
                             warp_enabled=warp)


def _trainer(pipe, train_cfg, sampler, **kw):
    return Trainer(pipe, train_cfg, sampler, **kw)


@pytest.fixture()
def trainer(model_cfg, mapping, generator, discriminator, base_encoder,
            train_cfg, sampler):
    pipe = _fresh_pipe(model_cfg, mapping, generator, discriminator, base_encoder)
    return _trainer(pipe, train_cfg, sampler, check_frozen=True)


def test_no_edit_step_records_all_terms(trainer, sampler, rng):
    x, _, _ = sampler.sample(rng, 2)
    rec = trainer.train_step(x, PathKind.NO_EDIT)
    for key in ("loss_d", "adv_g", "rec_l2", "rec_p", "rec_id", "feat_reg",
                "total", "lr"):
        assert key in rec, key
        assert np.isfinite(rec[key]) or key == "path"
    # flow supervision is an edited-path term by default
    assert "flow" not in rec
    assert rec["lr"] == pytest.approx(1e-4)
    assert trainer.state.step == 1


def test_cycle_step_drops_pixel_l2(trainer, sampler, rng, mapping):
    x, _, _ = sampler.sample(rng, 2)
    w_r = sample_codes(mapping, 2, seed=55)
    rec = trainer.train_step(x, PathKind.CYCLE, alphas=[0.42, 0.48], w_r=w_r)
    # cycle preset has lambda_r1 = 0: the term is absent, not merely scaled
    assert "rec_l2" not in rec
    assert "flow" in rec
    assert np.isfinite(rec["total"])


def test_cycle_step_requires_edit_args(trainer, sampler, rng):
    x, _, _ = sampler.sample(rng, 2)
    with pytest.raises(ValueError):
        trainer.train_step(x, PathKind.CYCLE)


def test_frozen_modules_stay_fixed(trainer, sampler, rng):
    pipe = trainer.pipe
    before = {
        "e0": copy.deepcopy(pipe.e0.state_dict()),
        "gen": copy.deepcopy(pipe.generator.state_dict()),
        "map": copy.deepcopy(pipe.mapping.state_dict()),
    }
    for _ in range(3):
        trainer.step_once()
    for mod, name in [(pipe.e0, "e0"), (pipe.generator, "gen"),
                      (pipe.mapping, "map")]:
        for k, t in mod.state_dict().items():
            assert torch.equal(t, before[name][k]), f"{name}/{k} changed"


def test_trainable_modules_change(trainer, sampler, rng):
    pipe = trainer.pipe
    before_e1 = copy.deepcopy(pipe.e1.state_dict())
    before_e2 = copy.deepcopy(pipe.e2.state_dict())
    x, _, _ = sampler.sample(rng, 2)
    trainer.train_step(x, PathKind.NO_EDIT)
    # the refiner's zero-initialized output conv gets a gradient immediately
    assert any(not torch.equal(t, before_e2[k])
               for k, t in pipe.e2.state_dict().items())
    # the residual detector only sees gradient once that conv is nonzero
    for _ in range(3):
        x, _, _ = sampler.sample(rng, 2)
        trainer.train_step(x, PathKind.NO_EDIT)
    assert any(not torch.equal(t, before_e1[k])
               for k, t in pipe.e1.state_dict().items())


def test_lambda_fl_zero_skips_oracle(model_cfg, mapping, generator,
                                     discriminator, base_encoder, train_cfg,
                                     sampler, rng):
    no_fl = dc.replace(
        train_cfg,
        lambdas_no_edit=dc.replace(train_cfg.lambdas_no_edit, lambda_fl=0.0),
        lambdas_cycle=dc.replace(train_cfg.lambdas_cycle, lambda_fl=0.0))
    pipe = _fresh_pipe(model_cfg, mapping, generator, discriminator, base_encoder)
    tr = _trainer(pipe, no_fl, sampler)
    x, _, _ = sampler.sample(rng, 2)
    w_r = sample_codes(mapping, 2, seed=3)
    tr.train_step(x, PathKind.CYCLE, alphas=[0.45, 0.45], w_r=w_r)
    assert tr.oracle_calls == 0


def test_divergence_detection(trainer, sampler, rng):
    with torch.no_grad():
        for p in trainer.pipe.e1.parameters():
            p.fill_(float("nan"))
    x, _, _ = sampler.sample(rng, 2)
    with pytest.raises(lw.TrainingDiverged):
        trainer.train_step(x, PathKind.NO_EDIT)


def test_run_writes_jsonl_log(model_cfg, mapping, generator, discriminator,
                              base_encoder, train_cfg, sampler, tmp_path):
    fast = dc.replace(train_cfg, schedule=dc.replace(
        train_cfg.schedule, log_every=2, checkpoint_every=0))
    pipe = _fresh_pipe(model_cfg, mapping, generator, discriminator, base_encoder)
    tr = _trainer(pipe, fast, sampler, out_dir=tmp_path)
    tr.run(total_steps=4)
    lines = (tmp_path / "train_log.jsonl").read_text().strip().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[-1])
    assert rec["step"] == 4
    assert "flow_epe" in rec


def test_save_resume_bit_identical(model_cfg, mapping, generator, discriminator,
                                   base_encoder, train_cfg, sampler, tmp_path):
    def make():
        pipe = _fresh_pipe(model_cfg, mapping, generator, discriminator,
                           base_encoder)
        return _trainer(pipe, train_cfg, sampler)

    # run A: 6 uninterrupted steps
    tr_a = make()
    for _ in range(6):
        tr_a.step_once()

    # run B: 3 steps, save, fresh trainer, load, 3 more
    tr_b = make()
    for _ in range(3):
        tr_b.step_once()
    ckpt = tmp_path / "mid.ckpt"
    tr_b.save(ckpt)
    tr_c = make()
    tr_c.load(ckpt)
    assert tr_c.state.step == 3
    for _ in range(3):
        tr_c.step_once()

    for mod_a, mod_c in [(tr_a.pipe.e1, tr_c.pipe.e1),
                         (tr_a.pipe.e2, tr_c.pipe.e2),
                         (tr_a.pipe.flownet, tr_c.pipe.flownet),
                         (tr_a.pipe.discriminator, tr_c.pipe.discriminator)]:
        for (k, ta), tc in zip(mod_a.state_dict().items(),
                               mod_c.state_dict().values()):
            assert torch.equal(ta, tc), f"mismatch after resume: {k}"
    assert tr_a.rng.bit_generator.state == tr_c.rng.bit_generator.state


def test_lr_follows_schedule_mid_run(trainer, sampler, rng):
    trainer.state.step = 5000
    x, _, _ = sampler.sample(rng, 2)
    rec = trainer.train_step(x, PathKind.NO_EDIT)
    assert rec["lr"] == pytest.approx(5e-5)
    for group in trainer.opt_g.param_groups:
        assert group["lr"] == pytest.approx(5e-5 * group["lr_scale"])
    for group in trainer.opt_d.param_groups:
        assert group["lr"] == pytest.approx(5e-5)
