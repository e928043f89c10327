import numpy as np
import pytest
import torch
from torch import nn

from latentwarp.checkpoint import (load_checkpoint, load_module,
                                   module_arrays, save_checkpoint)


def test_round_trip_bit_exact(tmp_path):
    arrays = {
        "a/w": np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32),
        "b/x": np.arange(10, dtype=np.int64),
        "c": np.float16(1.5) * np.ones(2, dtype=np.float16),
    }
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {"version": 1, "note": "t"}, arrays)
    manifest, back = load_checkpoint(path)
    assert manifest["note"] == "t"
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype
        assert np.array_equal(back[k], arrays[k])


def test_version_enforced(tmp_path):
    import json
    import zipfile
    path = tmp_path / "bad.ckpt"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("manifest.json", json.dumps({"kind": "x"}))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_version_auto_added(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {"kind": "x"}, {})
    manifest, _ = load_checkpoint(path)
    assert manifest["version"] == 1


def test_module_round_trip(tmp_path):
    torch.manual_seed(0)
    m1 = nn.Sequential(nn.Conv2d(3, 4, 3), nn.Linear(2, 2))
    m2 = nn.Sequential(nn.Conv2d(3, 4, 3), nn.Linear(2, 2))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"version": 1}, module_arrays("net", m1))
    _, arrays = load_checkpoint(path)
    load_module(m2, "net", arrays)
    for (k1, t1), (k2, t2) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert k1 == k2
        assert torch.equal(t1, t2)


def test_load_module_missing_keys(tmp_path):
    m = nn.Linear(2, 2)
    with pytest.raises(ValueError, match="missing"):
        load_module(m, "net", {"net/weight": np.zeros((2, 2), np.float32)})
