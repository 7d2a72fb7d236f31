"""Tests for ICLF checkpoint files."""
import numpy as np
import pytest

from src.models.checkpoint import (
    MAGIC,
    Checkpoint,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    load_checkpoint,
    save_checkpoint,
)
from src.modules.optim import AdamState
from src.modules.transformer import param_shapes
from src.utils.errors import FormatError


def _adam_for(model, step=7):
    m = {k: np.full(v.shape, 0.25, dtype=np.float32) for k, v in model.params.items()}
    v = {k: np.full(v.shape, 0.5, dtype=np.float32) for k, v in model.params.items()}
    return AdamState(m=m, v=v, step=step)


def test_round_trip_with_optimizer_state(model, tmp_path):
    adam = _adam_for(model)
    path = save_checkpoint(tmp_path / "ckpt" / "step-00000007.iclf", model, adam, {"step": 7, "seed": 2})
    ckpt = load_checkpoint(path)
    assert isinstance(ckpt, Checkpoint)
    assert ckpt.step == 7
    assert ckpt.meta["seed"] == 2
    assert ckpt.model.config == model.config
    for name, value in model.params.items():
        np.testing.assert_array_equal(ckpt.model.params[name], value)
        assert ckpt.model.params[name].dtype == np.float32
    assert ckpt.adam.step == 7
    np.testing.assert_array_equal(ckpt.adam.m["head.b"], adam.m["head.b"])
    np.testing.assert_array_equal(ckpt.adam.v["head.w"], adam.v["head.w"])
    assert not list(path.parent.glob("*.tmp"))


def test_round_trip_without_optimizer_state(model):
    ckpt = checkpoint_from_bytes(checkpoint_to_bytes(model, meta={"step": 3}))
    assert ckpt.adam is None
    assert ckpt.step == 3
    assert set(ckpt.model.params) == set(param_shapes(model.config))


def test_bad_magic(model):
    data = checkpoint_to_bytes(model)
    assert data[:4] == MAGIC
    with pytest.raises(FormatError) as err:
        checkpoint_from_bytes(b"NOPE" + data[4:])
    assert err.value.offset == 0


def test_unsupported_version(model):
    data = bytearray(checkpoint_to_bytes(model))
    data[4] = 99
    with pytest.raises(FormatError) as err:
        checkpoint_from_bytes(bytes(data))
    assert err.value.offset == 4


def test_truncated_file(model):
    data = checkpoint_to_bytes(model)
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        with pytest.raises(FormatError):
            checkpoint_from_bytes(data[:cut])


def test_trailing_bytes(model):
    with pytest.raises(FormatError):
        checkpoint_from_bytes(checkpoint_to_bytes(model) + b"\x00")


def test_missing_parameter(model):
    params = dict(model.params)
    params.pop("head.b")
    broken = model.with_params(params)
    with pytest.raises(FormatError, match="head.b"):
        checkpoint_from_bytes(checkpoint_to_bytes(broken))


def test_wrong_parameter_shape(model):
    params = dict(model.params)
    params["head.b"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(FormatError, match="shape"):
        checkpoint_from_bytes(checkpoint_to_bytes(model.with_params(params)))


def test_save_replaces_existing_file(model, tmp_path):
    path = tmp_path / "step-00000001.iclf"
    save_checkpoint(path, model, meta={"step": 1})
    save_checkpoint(path, model, meta={"step": 2})
    assert load_checkpoint(path).step == 2
