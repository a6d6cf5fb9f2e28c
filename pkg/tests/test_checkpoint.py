import zipfile

import numpy as np
import pytest
import torch

from enaet import checkpoint
from enaet.trainer import new_state, train_step
from support import batch, params_vector, tiny_config, tiny_split


def _trained_state(cfg, steps=2):
    split = tiny_split()
    state = new_state(cfg, split)
    x, y, u = batch(split, 4)
    for _ in range(steps):
        train_step(state, x, y, u, cfg, split.num_classes, 10)
    return split, state


def test_roundtrip_restores_everything(tmp_path):
    cfg = tiny_config()
    split, state = _trained_state(cfg)
    checkpoint.save(tmp_path / "c.zip", state, cfg.hash(), {"epoch": 3, "tracker": [0.5]})
    fresh = new_state(cfg, split)
    meta = checkpoint.load_into(tmp_path / "c.zip", fresh, cfg.hash())
    assert meta["epoch"] == 3 and meta["tracker"] == [0.5]
    assert fresh.step == state.step
    assert np.array_equal(params_vector(fresh.net), params_vector(state.net))
    assert np.array_equal(params_vector(fresh.teacher), params_vector(state.teacher))
    for name in state.rngs:
        assert fresh.rngs[name].random() == state.rngs[name].random()
    for a, b in zip(fresh.net.buffers(), state.net.buffers()):
        assert torch.equal(a, b)


def test_continuation_after_load_is_identical(tmp_path):
    cfg = tiny_config()
    split, state = _trained_state(cfg)
    checkpoint.save(tmp_path / "c.zip", state, cfg.hash())
    fresh = new_state(cfg, split)
    checkpoint.load_into(tmp_path / "c.zip", fresh, cfg.hash())
    x, y, u = batch(split, 4, offset=2)
    _, r1 = train_step(state, x, y, u, cfg, split.num_classes, 10)
    _, r2 = train_step(fresh, x, y, u, cfg, split.num_classes, 10)
    assert r1.total == r2.total
    assert np.array_equal(params_vector(fresh.net), params_vector(state.net))


def test_float64_arrays_stored_natively(tmp_path):
    cfg = tiny_config()
    _, state = _trained_state(cfg, steps=1)
    checkpoint.save(tmp_path / "c.zip", state, cfg.hash())
    manifest, arrays = checkpoint.read(tmp_path / "c.zip")
    assert manifest["format"] == "enaet-ckpt-1"
    assert any(a.dtype == np.float64 for a in arrays.values())
    with zipfile.ZipFile(tmp_path / "c.zip") as z:
        assert "manifest.json" in z.namelist()


def test_config_hash_mismatch(tmp_path):
    cfg = tiny_config()
    split, state = _trained_state(cfg, steps=1)
    checkpoint.save(tmp_path / "c.zip", state, cfg.hash())
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_into(tmp_path / "c.zip", new_state(cfg, split), "0" * 16)


def test_corrupt_file(tmp_path):
    bad = tmp_path / "bad.zip"
    bad.write_bytes(b"not a zip")
    cfg = tiny_config()
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_into(bad, new_state(cfg, tiny_split()), cfg.hash())
