import shutil
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

import latentwarp as lw
from latentwarp.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A full CLI workflow: config -> generator bundle -> base encoder ->
    short training -> dataset. Later tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    cfg = lw.TrainConfig()
    cfg_path = root / "config.yaml"
    lw.save_config(cfg, cfg_path)

    assert main(["pretrain-generator", "--config", str(cfg_path),
                 "--out", str(root / "gen.ckpt")]) == 0
    assert main(["train-e0", "--config", str(cfg_path),
                 "--generator", str(root / "gen.ckpt"),
                 "--steps", "80", "--out", str(root / "base.ckpt")]) == 0
    assert main(["make-dataset", "--config", str(cfg_path),
                 "--generator", str(root / "gen.ckpt"),
                 "--n", "8", "--out", str(root / "ds")]) == 0
    assert main(["train", "--config", str(cfg_path),
                 "--bundle", str(root / "base.ckpt"),
                 "--steps", "3", "--out", str(root / "run")]) == 0
    return root


def test_artifacts_exist(workdir):
    assert (workdir / "gen.ckpt").exists()
    assert (workdir / "base.ckpt").exists()
    assert (workdir / "ds" / "labels.csv").exists()
    assert (workdir / "run" / "trained.ckpt").exists()
    assert (workdir / "run" / "trainer_final.ckpt").exists()


def test_invert_and_edit_commands(workdir, tmp_path):
    bundle = workdir / "run" / "trained.ckpt"
    img = workdir / "ds" / "img_00000.png"
    out_inv = tmp_path / "inv.png"
    assert main(["invert", "--bundle", str(bundle), "--image", str(img),
                 "--out", str(out_inv)]) == 0
    assert out_inv.exists()

    # write a direction file and edit with strength 0: must equal inversion
    pipe = lw.load_pipeline(bundle)
    d = pipe.generator.attribute_direction("shift")
    dpath = tmp_path / "shift.wdir"
    lw.save_direction(d, dpath)
    out_edit = tmp_path / "edit0.png"
    assert main(["edit", "--bundle", str(bundle), "--image", str(img),
                 "--direction", str(dpath), "--strength", "0",
                 "--out", str(out_edit)]) == 0
    a = lw.load_png(out_inv)
    b = lw.load_png(out_edit)
    assert torch.equal(a, b)

    # nonzero strength changes the output
    out_edit2 = tmp_path / "edit1.png"
    assert main(["edit", "--bundle", str(bundle), "--image", str(img),
                 "--direction", str(dpath), "--strength", "0.8",
                 "--out", str(out_edit2)]) == 0
    assert not torch.equal(lw.load_png(out_edit2), a)


def test_eval_commands(workdir, tmp_path):
    bundle = workdir / "run" / "trained.ckpt"
    rep = tmp_path / "recon.txt"
    assert main(["eval-recon", "--bundle", str(bundle),
                 "--dataset", str(workdir / "ds"), "--limit", "4",
                 "--out", str(rep)]) == 0
    report = lw.MetricReport.load(rep)
    assert "recon_l2" in report.values

    pipe = lw.load_pipeline(bundle)
    d = pipe.generator.attribute_direction("shift")
    dpath = tmp_path / "shift.wdir"
    lw.save_direction(d, dpath)
    rep2 = tmp_path / "edit.txt"
    assert main(["eval-edit", "--bundle", str(bundle),
                 "--dataset", str(workdir / "ds"), "--direction", str(dpath),
                 "--limit", "4", "--out", str(rep2)]) == 0
    assert "fid" in lw.MetricReport.load(rep2).values


def test_flow_command(workdir, tmp_path):
    a = workdir / "ds" / "img_00000.png"
    b = workdir / "ds" / "img_00001.png"
    out = tmp_path / "f.flo"
    color = tmp_path / "f.png"
    assert main(["flow", "--image-a", str(a), "--image-b", str(b),
                 "--out", str(out), "--color", str(color)]) == 0
    flow = lw.read_flo(out)
    assert flow.shape[0] == 2
    assert color.exists()


def test_runtime_command(workdir, tmp_path):
    out = tmp_path / "rt.txt"
    assert main(["runtime", "--bundle", str(workdir / "run" / "trained.ckpt"),
                 "--dataset", str(workdir / "ds"), "--limit", "2",
                 "--out", str(out)]) == 0
    assert lw.MetricReport.load(out).values["seconds_per_image"] > 0


def test_missing_config_key_exits_nonzero(workdir, tmp_path, capsys):
    raw = yaml.safe_load((workdir / "config.yaml").read_text())
    del raw["schedule"]["batch_size"]
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(raw))
    code = main(["train", "--config", str(bad),
                 "--bundle", str(workdir / "base.ckpt"),
                 "--steps", "1", "--out", str(tmp_path / "r")])
    assert code != 0
    assert "schedule.batch_size" in capsys.readouterr().err


def test_unknown_subcommand_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code != 0


def test_no_subcommand_prints_usage(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err.lower()
