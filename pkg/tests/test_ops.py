import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hsict import ops
from hsict.errors import ConfigError, DimensionError
from hsict.ops import PoolConfig, RunningStats
from hsict.tensor import Tensor

from oracles import conv2d_loops, gelu_exact, pool2d_loops, softmax_exact

F64 = np.float64


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad)


# -- conv2d --------------------------------------------------------------------------

def test_conv_all_ones_sum():
    out = ops.conv2d(t64(np.ones((1, 1, 3, 3))), t64(np.ones((1, 1, 3, 3))), t64([0.0]))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv_scalar_kernel():
    x = t64([[[[1, 2], [3, 4]]]])
    out = ops.conv2d(x, t64([[[[2.0]]]]))
    np.testing.assert_array_equal(out.data[0, 0], [[2, 4], [6, 8]])


def test_conv_is_cross_correlation():
    # an asymmetric kernel picks the right-hand neighbour, not the left
    x = t64(np.arange(5.0).reshape(1, 1, 1, 5))
    k = t64([[[[0.0, 0.0, 1.0]]]])
    out = ops.conv2d(x, k, pad=(0, 1))
    np.testing.assert_array_equal(out.data.ravel(), [1, 2, 3, 4, 0])


def test_conv_random_matches_loops():
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = ops.conv2d(t64(x), t64(w), t64(b))
    ref = conv2d_loops(x, w, b)
    assert np.max(np.abs(out.data - ref) / np.maximum(1.0, np.abs(ref))) <= 1e-6


@pytest.mark.parametrize("stride,pad,groups,cin,cout,k", [
    (1, 1, 1, 2, 3, 3), (2, 1, 1, 3, 2, 3), (2, 0, 1, 2, 2, 1), (1, 1, 2, 4, 6, 3),
    (2, 1, 4, 4, 4, 3), (1, 2, 3, 3, 3, 5), (3, 1, 1, 2, 2, 2),
])
def test_conv_stride_pad_groups_match_loops(stride, pad, groups, cin, cout, k):
    rng = np.random.default_rng(stride * 100 + pad * 10 + groups)
    x = rng.standard_normal((2, cin, 7, 6))
    w = rng.standard_normal((cout, cin // groups, k, k))
    b = rng.standard_normal(cout)
    out = ops.conv2d(t64(x), t64(w), t64(b), stride, pad, groups)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, stride, pad, groups), rtol=1e-6, atol=1e-9)


def test_conv_float32_kept():
    x = Tensor(np.ones((1, 2, 4, 4), dtype=np.float32))
    w = Tensor(np.ones((2, 2, 3, 3), dtype=np.float32))
    assert ops.conv2d(x, w, pad=1).dtype == np.float32


def test_conv_shape_errors():
    x = t64(np.ones((1, 4, 5, 5)))
    with pytest.raises(DimensionError, match="channel"):
        ops.conv2d(x, t64(np.ones((2, 3, 3, 3))))
    with pytest.raises(ConfigError):
        ops.conv2d(t64(np.ones((1, 3, 5, 5))), t64(np.ones((2, 1, 3, 3))), groups=2)
    with pytest.raises(DimensionError):
        ops.conv2d(t64(np.ones((3, 5, 5))), t64(np.ones((2, 3, 3, 3))))


# -- pooling ---------------------------------------------------------------------------

def test_pool_trivial_values():
    x = t64([[[[1, 2], [3, 4]]]])
    assert ops.pool2d(x, PoolConfig(2, 2, "max")).data.item() == 4.0
    assert ops.pool2d(x, PoolConfig(2, 2, "avg")).data.item() == 2.5


@pytest.mark.parametrize("mode", ["max", "avg"])
@pytest.mark.parametrize("pad", [0, 1])
def test_pool_matches_window_scan(mode, pad):
    x = np.random.default_rng(3).standard_normal((1, 2, 6, 6))
    out = ops.pool2d(t64(x), PoolConfig(3, 2, mode, pad))
    np.testing.assert_allclose(out.data, pool2d_loops(x, 3, 2, mode, pad), rtol=0, atol=1e-15)


def test_pool_window_too_large():
    with pytest.raises(DimensionError):
        ops.pool2d(t64(np.ones((1, 1, 2, 2))), PoolConfig(3, 1, "max"))


@given(st.floats(-1e3, 1e3, allow_nan=False), st.integers(1, 3), st.integers(1, 3))
@settings(max_examples=40, deadline=None)
def test_avg_pool_constant_is_exact(c, window, stride):
    x = t64(np.full((1, 2, 5, 5), c))
    out = ops.pool2d(x, PoolConfig(window, stride, "avg"))
    assert np.all(out.data == c)


def test_global_avg_pool():
    assert ops.global_avg_pool(t64(np.full((1, 1, 3, 3), 5.0))).data.item() == 5.0
    assert ops.global_avg_pool(t64([[[[1, 2], [3, 4]]]])).data.item() == 2.5
    x = np.random.default_rng(1).standard_normal((2, 3, 4, 5))
    out = ops.global_avg_pool(t64(x))
    assert out.shape == (2, 3, 1, 1)
    ref = np.array([[math.fsum(x[n, c].ravel()) / 20 for c in range(3)] for n in range(2)])
    np.testing.assert_allclose(out.data[:, :, 0, 0], ref, rtol=0, atol=1e-7)


def test_adaptive_avg_pool_even_grid():
    x = np.random.default_rng(2).standard_normal((1, 2, 14, 14))
    out = ops.adaptive_avg_pool(t64(x), (7, 7))
    np.testing.assert_allclose(out.data, pool2d_loops(x, 2, 2, "avg"), atol=1e-12)


# -- normalization -----------------------------------------------------------------------

def _affine(c):
    return t64(np.ones(c)), t64(np.zeros(c))


def test_normalize_constant_gives_zero():
    g, b = _affine(2)
    out = ops.normalize(t64(np.full((2, 2, 3, 3), 7.0)), "batch", g, b, training=True)
    assert np.all(out.data == 0)


def test_normalize_two_values_symmetric():
    g, b = _affine(1)
    x = np.array([1.0, 3.0, 1.0, 3.0]).reshape(2, 1, 1, 2)
    out = ops.normalize(t64(x), "batch", g, b, eps=1e-12, training=True)
    np.testing.assert_allclose(np.unique(out.data), [-1.0, 1.0], atol=1e-6)


def test_batch_norm_moments():
    x = np.random.default_rng(5).standard_normal((4, 3, 5, 5)) * 3 + 2
    g, b = _affine(3)
    out = ops.normalize(t64(x), "batch", g, b, training=True).data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) <= 1e-6)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) <= 1e-4)


def test_layer_norm_is_per_token():
    x = np.random.default_rng(6).standard_normal((2, 6, 3, 3))
    g, b = _affine(6)
    out = ops.normalize(t64(x), "layer", g, b).data
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=1), 1, atol=1e-4)


def test_batch_norm_training_needs_batch():
    g, b = _affine(2)
    with pytest.raises(DimensionError):
        ops.normalize(t64(np.ones((1, 2, 3, 3))), "batch", g, b, training=True)


def test_batch_norm_eval_uses_running_stats():
    g, b = _affine(1)
    stats = RunningStats(np.array([2.0]), np.array([4.0]))
    x = t64(np.full((1, 1, 2, 2), 6.0))
    out = ops.normalize(x, "batch", g, b, eps=1e-12, running_stats=stats, training=False)
    np.testing.assert_allclose(out.data, 2.0)


def test_running_stats_momentum():
    g, b = _affine(1)
    stats = RunningStats.fresh(1, F64)
    x = np.array([0.0, 2.0]).reshape(2, 1, 1, 1)
    ops.normalize(t64(x), "batch", g, b, running_stats=stats, training=True)
    assert stats.mean[0] == pytest.approx(0.1)
    assert stats.var[0] == pytest.approx(0.9 + 0.1 * 2.0)


def test_normalize_rejects_bad_eps():
    g, b = _affine(1)
    with pytest.raises(ConfigError):
        ops.normalize(t64(np.ones((2, 1, 1, 1))), "layer", g, b, eps=0.0)


# -- activations and softmax ---------------------------------------------------------------

def test_activation_values():
    assert ops.activation(t64([-2.0, 3.0]), "relu").data.tolist() == [0.0, 3.0]
    assert ops.activation(t64([0.0]), "sigmoid").data.item() == 0.5
    assert ops.activation(t64([1.0]), "gelu").data.item() == pytest.approx(0.8413447461, abs=1e-10)
    assert gelu_exact(1.0) == pytest.approx(0.8413447461, abs=1e-10)
    with pytest.raises(ConfigError):
        ops.activation(t64([0.0]), "swish")


def test_gelu_matches_erf_oracle():
    xs = np.linspace(-6, 6, 97)
    out = ops.gelu(t64(xs)).data
    np.testing.assert_allclose(out, [gelu_exact(v) for v in xs], rtol=1e-12, atol=1e-15)


def test_sigmoid_saturates_finitely():
    out = ops.sigmoid(t64([-1e4, 1e4])).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


def test_softmax_values():
    np.testing.assert_array_equal(ops.softmax(t64([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_array_equal(ops.softmax(t64([[1000.0, 1000.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(ops.softmax(t64([[1.0, 2.0, 3.0]])).data[0],
                               [0.09003057, 0.24472847, 0.66524096], atol=5e-9)
    np.testing.assert_allclose(ops.softmax(t64([[1.0, 2.0, 3.0, 4.0, 5.0]])).data[0],
                               softmax_exact([1.0, 2.0, 3.0, 4.0, 5.0]), rtol=1e-12)


@given(arrays(F64, st.tuples(st.integers(1, 4), st.integers(1, 7)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_on_simplex(z):
    p = ops.softmax(t64(z), axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


# -- channel plumbing ------------------------------------------------------------------------

def test_concat_single_is_identity():
    x = np.random.default_rng(0).standard_normal((1, 3, 2, 2))
    np.testing.assert_array_equal(ops.concat_channels([t64(x)]).data, x)


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_concat_then_slice_is_identity(channels, seed):
    rng = np.random.default_rng(seed)
    parts = [rng.standard_normal((2, c, 3, 4)) for c in channels]
    cat = ops.concat_channels([t64(p) for p in parts])
    assert cat.shape == (2, sum(channels), 3, 4)
    start = 0
    for p in parts:
        np.testing.assert_array_equal(ops.channel_slice(cat, start, start + p.shape[1]).data, p)
        start += p.shape[1]


def test_concat_spatial_mismatch():
    with pytest.raises(DimensionError):
        ops.concat_channels([t64(np.ones((1, 2, 4, 4))), t64(np.ones((1, 3, 4, 5)))])


def test_channel_pool_modes():
    x = np.random.default_rng(0).standard_normal((2, 5, 3, 3))
    np.testing.assert_allclose(ops.channel_pool(t64(x), "avg").data, x.mean(axis=1, keepdims=True))
    np.testing.assert_array_equal(ops.channel_pool(t64(x), "max").data, x.max(axis=1, keepdims=True))


def test_dropout_inverted_scaling():
    x = t64(np.ones((200, 50)))
    out = ops.dropout(x, 0.3, np.random.default_rng(0), training=True).data
    kept = out[out != 0]
    np.testing.assert_allclose(kept, 1 / 0.7)
    assert abs((out == 0).mean() - 0.3) < 0.02
    assert ops.dropout(x, 0.3, None, training=False) is x


def test_take_gathers_and_scatters():
    table = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    idx = np.array([[0, 2], [2, 2]])
    out = ops.take(table, idx)
    np.testing.assert_array_equal(out.data, [[[0, 2], [2, 2]], [[3, 5], [5, 5]]])
    out.backward(np.ones(out.shape))
    np.testing.assert_array_equal(table.grad, [[1, 0, 3], [1, 0, 3]])
