import dataclasses

import pytest

import latentwarp as lw
from latentwarp.config import load_config, save_config


def test_round_trip(tmp_path):
    cfg = lw.TrainConfig(seed=5)
    path = tmp_path / "cfg.yaml"
    save_config(cfg, path)
    loaded = load_config(path)
    assert loaded == cfg


def test_missing_key_names_path(tmp_path):
    cfg = lw.TrainConfig()
    path = tmp_path / "cfg.yaml"
    save_config(cfg, path)
    import yaml
    raw = yaml.safe_load(path.read_text())
    del raw["schedule"]["learning_rate"]
    path.write_text(yaml.safe_dump(raw))
    with pytest.raises(lw.ConfigError, match="schedule.learning_rate"):
        load_config(path)


def test_missing_section(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("model: {}\n")
    with pytest.raises(lw.ConfigError, match="data"):
        load_config(path)


def test_missing_lambda_key(tmp_path):
    cfg = lw.TrainConfig()
    path = tmp_path / "cfg.yaml"
    save_config(cfg, path)
    import yaml
    raw = yaml.safe_load(path.read_text())
    del raw["lambdas"]["cycle"]["lambda_fl"]
    path.write_text(yaml.safe_dump(raw))
    with pytest.raises(lw.ConfigError, match="lambdas.cycle.lambda_fl"):
        load_config(path)


def test_tap_resolutions():
    cfg = lw.ModelConfig(image_size=64)
    assert cfg.tap_resolutions == (16, 32, 64)
    assert lw.ModelConfig(image_size=32).tap_resolutions == (8, 16, 32)


def test_defaults_match_desk_scale():
    cfg = lw.ModelConfig()
    assert cfg.latent_layers == 8
    assert cfg.latent_dim == 64
    assert cfg.z_dim == 64
    assert cfg.image_size == 64
