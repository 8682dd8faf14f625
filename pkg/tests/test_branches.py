import logging

import numpy as np
import pytest

from hsict import ops
from hsict.branches import (import_pretrained, init_residual_block, init_residual_branch, init_spatial_branch,
                            residual_block, residual_branch, spatial_block, spatial_branch)
from hsict.checkpoint import CheckpointData, write_checkpoint
from hsict.errors import ConfigError, DimensionError
from hsict.gradcheck import grad_check
from hsict.layers import ParamStore, zero_params
from hsict.ops import PoolConfig
from hsict.tensor import Tensor

F64 = np.float64


def randn(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


def test_shortcut_projection_presence():
    s = ParamStore(0, F64).scope("r")
    assert init_residual_block(s.scope("a"), 8, 8).shortcut is None
    assert init_residual_block(s.scope("b"), 8, 16).shortcut is not None
    assert init_residual_block(s.scope("c"), 8, 8, stride=2).shortcut is not None
    assert init_residual_block(s.scope("d"), 8, 16, pwc=True).pwc is not None


def test_zero_residual_mapping_is_relu():
    p = init_residual_block(ParamStore(0, F64).scope("r"), 4, 4)
    zero_params(p)
    x = randn(0, 1, 4, 5, 5)
    np.testing.assert_array_equal(residual_block(Tensor(x), p).data, np.maximum(x, 0))
    xp = np.abs(x)
    np.testing.assert_array_equal(residual_block(Tensor(xp), p).data, xp)


def test_missing_projection_is_config_error():
    p = init_residual_block(ParamStore(0, F64).scope("r"), 4, 4)
    p.conv1.stride = 2
    with pytest.raises(ConfigError):
        residual_block(Tensor(randn(0, 1, 4, 6, 6)), p)


@pytest.mark.parametrize("c_in,c_out,stride,pwc", [(8, 8, 1, False), (4, 8, 2, True)])
def test_residual_block_gradcheck(c_in, c_out, stride, pwc):
    p = init_residual_block(ParamStore(1, F64).scope("r"), c_in, c_out, stride, pwc)
    rep = grad_check(lambda t: residual_block(t, p), None, randn(1, 1, c_in, 6, 6), tol=1e-4)
    assert rep.passed, rep.summary()


def test_residual_branch_shapes_and_schedule():
    p = init_residual_branch(ParamStore(0).scope("res"))
    x = np.zeros((1, 3, 224, 224), np.float32)
    out = residual_branch(Tensor(x), p)
    assert out.shape == (1, 256, 7, 7)
    assert [b.conv2.out_channels for b in p.blocks] == [64, 128, 192, 256]
    assert [b.pwc is not None for b in p.blocks] == [True, False, True, False]
    x = randn(2, 1, 3, 32, 32).astype(np.float32)
    np.testing.assert_array_equal(residual_branch(Tensor(x), p).data, residual_branch(Tensor(x), p).data)


def test_residual_branch_zero_blocks_identity_path():
    p = init_residual_branch(ParamStore(0, F64).scope("res"), (4, 4, 4, 4))
    for b in p.blocks:
        zero_params([b.conv1, b.conv2, b.pwc])
    x = Tensor(randn(0, 1, 3, 32, 32))
    entry = ops.relu(p.entry_norm(p.entry(x)))
    expected = entry
    for b in p.blocks:
        expected = ops.relu(b.shortcut(expected))
    np.testing.assert_allclose(residual_branch(x, p).data, expected.data, atol=1e-12)


def test_spatial_block_delta_conv_is_maxpool():
    p = init_spatial_branch(ParamStore(0, F64).scope("sp"), (2, 2, 2, 2, 2)).blocks[1]
    zero_params(p.conv)
    p.conv.weight.data[[0, 1], [0, 1], 1, 1] = 1.0
    p.bn.gamma.data[:] = 1
    x = np.abs(randn(0, 1, 2, 6, 7))
    out = spatial_block(Tensor(x), p)
    np.testing.assert_allclose(out.data, ops.pool2d(Tensor(x), PoolConfig(2, 2, "max")).data, atol=1e-4)
    assert out.shape == (1, 2, 3, 3)


def test_spatial_block_gradcheck():
    p = init_spatial_branch(ParamStore(2, F64).scope("sp"), (4, 4, 4, 4, 4)).blocks[1]
    rep = grad_check(lambda t: spatial_block(t, p, PoolConfig(2, 2, "avg")), None, randn(2, 1, 4, 6, 6), tol=1e-4)
    assert rep.passed, rep.summary()


def test_spatial_branch_shapes_and_pool_modes():
    p = init_spatial_branch(ParamStore(0).scope("sp"))
    assert [b.pool.mode for b in p.blocks] == ["max", "max", "max", "avg", "max"]
    assert spatial_branch(Tensor(np.zeros((1, 3, 224, 224), np.float32)), p).shape == (1, 160, 7, 7)
    assert spatial_branch(Tensor(np.zeros((1, 3, 64, 64), np.float32)), p).shape == (1, 160, 2, 2)


# -- pretrained import --------------------------------------------------------------------------

def _branch_store():
    store = ParamStore(4)
    init_residual_branch(store.scope("residual"), (4, 8, 8, 8))
    return store


def test_import_roundtrip(tmp_path):
    src = _branch_store()
    path = write_checkpoint(tmp_path / "res.hsct", CheckpointData(None, {n: p.data for n, p in src.params.items()}))
    dst = ParamStore(99)
    init_residual_branch(dst.scope("residual"), (4, 8, 8, 8))
    result = import_pretrained(path, {"residual.": "residual."}, dst.params)
    assert not result.unmatched and len(result.matched) == len(src.params)
    for n, p in src.params.items():
        np.testing.assert_array_equal(dst.params[n].data, p.data)


def test_import_empty_map_is_noop(tmp_path, caplog):
    src = _branch_store()
    path = write_checkpoint(tmp_path / "res.hsct", CheckpointData(None, {n: p.data for n, p in src.params.items()}))
    dst = ParamStore(99)
    init_residual_branch(dst.scope("residual"), (4, 8, 8, 8))
    before = {n: p.data.copy() for n, p in dst.params.items()}
    with caplog.at_level(logging.WARNING):
        result = import_pretrained(path, {}, dst.params)
    assert result.matched == []
    assert "matched 0 tensors" in caplog.text
    for n, p in dst.params.items():
        np.testing.assert_array_equal(p.data, before[n])


def test_import_shape_mismatch_names_tensor(tmp_path):
    path = write_checkpoint(tmp_path / "bad.hsct",
                            CheckpointData(None, {"pre.entry.weight": np.zeros((5, 3, 3, 3), np.float32)}))
    dst = _branch_store()
    with pytest.raises(DimensionError, match="pre.entry.weight"):
        import_pretrained(path, {"pre.": "residual."}, dst.params)


def test_import_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        import_pretrained(tmp_path / "nope.hsct", {}, {})
