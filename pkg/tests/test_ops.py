import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from evonas import ops
from evonas.ops import ActivationKind, ConnectiveKind, ConvSpec, NormKind
from evonas.tensor import NumericError, ShapeError, Tensor, parameter
from oracles import (adaptive_pool_3d, away_from_zero, direct_conv, direct_conv_transpose,
                     distinct_values, numeric_grads)


# ---------------------------------------------------------------- conv

def test_transposed_grouped_conv_doubles_resolution():
    spec = ConvSpec(3, 12, kernel=3, stride=2, transposed=True, separable_depthwise=True, bias=False)
    x = Tensor(np.zeros((8, 3, 64, 64), np.float32))
    w = parameter(np.zeros(spec.weight_shape))
    assert ops.conv2d(x, spec, w).shape == (8, 12, 128, 128)
    assert spec.groups == 3


def test_identity_1x1_conv():
    spec = ConvSpec(4, 4, kernel=1)
    x = np.random.default_rng(0).normal(size=(1, 4, 8, 8))
    w = np.eye(4).reshape(4, 4, 1, 1)
    out = ops.conv2d(Tensor(x), spec, Tensor(w), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)


def test_all_ones_stride2_center_is_nine():
    spec = ConvSpec(1, 1, kernel=3, stride=2, bias=False)
    out = ops.conv2d(Tensor(np.ones((1, 1, 5, 5))), spec, Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 1, 1] == 9.0
    # corners see a 2x2 patch inside the zero padding
    assert out.data[0, 0, 0, 0] == 4.0


@pytest.mark.parametrize("transposed", [False, True])
@pytest.mark.parametrize("k", [1, 3, 5])
@pytest.mark.parametrize("s", [1, 2])
@pytest.mark.parametrize("depthwise", [False, True])
@pytest.mark.parametrize("hw", [(1, 1), (3, 5), (8, 8), (7, 4)])
def test_conv_matches_direct_summation(transposed, k, s, depthwise, hw):
    rng = np.random.default_rng(hash((transposed, k, s, depthwise, hw)) % 2**32)
    cin, cout = 2, 4
    spec = ConvSpec(cin, cout, k, s, transposed, depthwise, False, True)
    x = rng.normal(size=(2, cin) + hw)
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=cout)
    out = ops.conv2d(Tensor(x), spec, Tensor(w), Tensor(b)).data
    pad = (k - 1) // 2
    if transposed:
        ref = direct_conv_transpose(x, w, b, s, pad, s - 1, spec.groups)
        assert out.shape[2:] == (hw[0] * s, hw[1] * s)
    else:
        ref = direct_conv(x, w, b, s, pad, spec.groups)
        assert out.shape[2:] == (math.ceil(hw[0] / s), math.ceil(hw[1] / s))
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-10)


def test_conv_channel_mismatch():
    spec = ConvSpec(3, 4)
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), spec, Tensor(np.zeros(spec.weight_shape)))


def test_conv_nonfinite_weights():
    spec = ConvSpec(1, 1)
    w = np.zeros(spec.weight_shape)
    w[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), spec, Tensor(w))


@pytest.mark.parametrize("kw", [dict(kernel=2), dict(stride=3), dict(in_channels=2, out_channels=3, separable_depthwise=True)])
def test_convspec_rejects_illegal(kw):
    base = dict(in_channels=2, out_channels=4)
    with pytest.raises(ValueError):
        ConvSpec(**{**base, **kw})


@pytest.mark.parametrize("transposed", [False, True])
def test_weight_norm_scales_filters_to_gain(transposed):
    rng = np.random.default_rng(3)
    spec = ConvSpec(2, 4, 3, 1, transposed, False, True, False)
    v = rng.normal(size=spec.weight_shape)
    gain = rng.uniform(0.5, 2, size=4)
    x = rng.normal(size=(1, 2, 5, 5))
    out = ops.conv2d(Tensor(x), spec, Tensor(v), None, Tensor(gain)).data
    if transposed:
        norms = np.sqrt((v ** 2).sum(axis=(0, 2, 3)))
        w_eff = v * (gain / norms)[None, :, None, None]
        ref = direct_conv_transpose(x, w_eff, None, 1, 1, 0, 1)
    else:
        norms = np.sqrt((v ** 2).sum(axis=(1, 2, 3)))
        w_eff = v * (gain / norms)[:, None, None, None]
        ref = direct_conv(x, w_eff, None, 1, 1, 1)
    np.testing.assert_allclose(out, ref, rtol=1e-10)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("transposed", [False, True])
def test_conv_gradients(seed, transposed):
    rng = np.random.default_rng(seed)
    k, s = (1, 3, 5)[seed % 3], 1 + seed % 2
    spec = ConvSpec(2, 4, k, s, transposed, bool(seed % 2), bool(seed // 2), True)
    x = rng.normal(size=(2, 2, 4, 3))
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=4)
    if spec.weight_norm:
        g = rng.uniform(0.5, 1.5, size=4)
        err = numeric_grads(lambda x, w, b, g: ops.conv2d(x, spec, w, b, g), [x, w, b, g])
    else:
        err = numeric_grads(lambda x, w, b: ops.conv2d(x, spec, w, b), [x, w, b])
    assert err < 1e-6


# ---------------------------------------------------------------- activations

def test_relu_example():
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_softmax_two_equal_channels():
    out = ops.softmax_channels(Tensor(np.zeros((1, 2, 1, 1))))
    np.testing.assert_allclose(out.data.ravel(), [0.5, 0.5])


def test_elu_minus_one():
    assert ops.elu(Tensor([-1.0])).data[0] == pytest.approx(math.exp(-1) - 1, abs=1e-12)
    assert ops.elu(Tensor([-1.0])).data[0] == pytest.approx(-0.6321, abs=1e-4)


def test_selu_constants():
    y = ops.selu(Tensor([1.0, -1.0])).data
    assert y[0] == pytest.approx(1.0507009873554805)
    assert y[1] == pytest.approx(1.0507009873554805 * 1.6732632423543772 * (math.exp(-1) - 1))


def test_sigmoid_is_stable_for_large_inputs():
    y = ops.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    np.testing.assert_allclose(y, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(y))


def test_prelu_uses_single_slope():
    slope = parameter(np.array([0.25]), np.float64)
    np.testing.assert_allclose(ops.prelu(Tensor([-2.0, 3.0]), slope).data, [-0.5, 3.0])


@given(arrays(np.float64, (2, 5, 3, 3), elements=st.floats(-30, 30)))
def test_softmax_channels_sums_to_one(x):
    s = ops.softmax_channels(Tensor(x)).data.sum(axis=1)
    np.testing.assert_allclose(s, 1.0, atol=1e-6)


@pytest.mark.parametrize("kind", list(ActivationKind))
def test_activation_gradients(kind):
    rng = np.random.default_rng(7)
    x = away_from_zero(rng.normal(size=(2, 3, 3, 3)))
    if kind is ActivationKind.PRELU:
        err = numeric_grads(lambda x, a: ops.activation(x, kind, a), [x, np.array([0.3])])
    else:
        err = numeric_grads(lambda x: ops.activation(x, kind), [x])
    assert err < 1e-6


# ---------------------------------------------------------------- normalisation

def test_batch_norm_two_values():
    x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
    rm, rv = np.zeros(1), np.ones(1)
    y = ops.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=True).data.ravel()
    expect = 1 / math.sqrt(1 + 1e-5)
    np.testing.assert_allclose(y, [-expect, expect], rtol=1e-12)
    assert abs(y[1]) == pytest.approx(0.999995, abs=1e-6)
    # running stats: momentum 0.1, unbiased variance 2
    assert rm[0] == pytest.approx(0.2)
    assert rv[0] == pytest.approx(0.9 + 0.1 * 2.0)


def test_batch_norm_eval_uses_running_stats():
    x = Tensor(np.full((2, 1, 2, 2), 5.0))
    y = ops.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), np.array([1.0]), np.array([4.0]), False)
    np.testing.assert_allclose(y.data, 4.0 / math.sqrt(4.0 + 1e-5))


@given(arrays(np.float64, (4, 3, 2, 2), elements=st.floats(-50, 50)))
def test_batch_norm_standardises(x):
    var = x.var(axis=(0, 2, 3))
    y = ops.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), True).data
    for c in range(3):
        assert abs(y[:, c].mean()) < 1e-6
        if var[c] > 1e-1:
            assert abs(y[:, c].var() - 1) < 1e-3


def test_instance_norm_constant_is_zero():
    np.testing.assert_array_equal(ops.instance_norm(Tensor(np.full((2, 3, 4, 4), 7.0))).data, 0.0)


def test_lrn_tiny_alpha_is_identity():
    x = np.random.default_rng(0).normal(size=(1, 5, 3, 3))
    y = ops.local_response_norm(Tensor(x), alpha=1e-12).data
    np.testing.assert_allclose(y, x, rtol=1e-10)


def test_lrn_matches_window_definition():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 2, 2))
    for size in (1, 2, 3, 6):
        y = ops.local_response_norm(Tensor(x), size=size, alpha=0.3).data
        ref = np.empty_like(x)
        for c in range(6):
            lo, hi = max(0, c - size // 2), min(6, c + (size - 1) // 2 + 1)
            ref[:, c] = x[:, c] / (1 + 0.3 / size * (x[:, lo:hi] ** 2).sum(axis=1)) ** 0.75
        np.testing.assert_allclose(y, ref, rtol=1e-12)


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(training):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 4, 3, 3))
    err = numeric_grads(lambda x, w, b: ops.batch_norm(x, w, b, np.zeros(4) + 0.2, np.ones(4) + 0.3, training),
                        [x, rng.normal(size=4), rng.normal(size=4)])
    assert err < 1e-6


@pytest.mark.parametrize("kind", [NormKind.INSTANCE, NormKind.LRN, NormKind.SOFTMAX])
def test_norm_gradients(kind):
    x = np.random.default_rng(4).normal(size=(2, 4, 3, 3))
    assert numeric_grads(lambda x: ops.normalize(x, kind), [x]) < 1e-6


def test_lrn_gradient_large_alpha():
    x = np.random.default_rng(5).normal(size=(2, 5, 2, 2))
    assert numeric_grads(lambda x: ops.local_response_norm(x, 3, alpha=0.7), [x]) < 1e-6


def test_normalize_none_is_identity():
    x = Tensor(np.ones((1, 1, 2, 2)))
    assert ops.normalize(x, NormKind.NONE) is x


# ---------------------------------------------------------------- pooling

def test_max_pool_examples():
    assert ops.max_pool_2x2(Tensor(np.array([[[[1.0, 2], [3, 4]]]]))).data.ravel().tolist() == [4.0]
    ramp = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(ops.max_pool_2x2(Tensor(ramp)).data[0, 0], [[5, 7], [13, 15]])
    np.testing.assert_array_equal(ops.max_pool_2x2(Tensor(np.full((1, 2, 6, 6), 3.0))).data,
                                  np.full((1, 2, 3, 3), 3.0))


def test_max_pool_odd_sizes_floor():
    assert ops.max_pool_2x2(Tensor(np.zeros((1, 1, 5, 3)))).shape == (1, 1, 2, 1)


def test_max_pool_too_small():
    with pytest.raises(ShapeError):
        ops.max_pool_2x2(Tensor(np.zeros((1, 1, 1, 4))))


def test_upsample_examples():
    np.testing.assert_array_equal(ops.upsample_nn_2x(Tensor(np.ones((1, 1, 1, 1)))).data, np.ones((1, 1, 2, 2)))
    x = np.array([[[[1.0, 2], [3, 4]]]])
    ref = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4.0]])
    np.testing.assert_array_equal(ops.upsample_nn_2x(Tensor(x)).data[0, 0], ref)
    t = parameter(x, np.float64)
    ops.upsample_nn_2x(t).sum().backward()
    np.testing.assert_array_equal(t.grad, np.full_like(x, 4.0))


def test_pool_gradients():
    rng = np.random.default_rng(6)
    assert numeric_grads(ops.max_pool_2x2, [distinct_values(rng, (2, 2, 5, 4))]) < 1e-6
    assert numeric_grads(ops.upsample_nn_2x, [rng.normal(size=(2, 2, 3, 2))]) < 1e-6


def test_adaptive_pool_length_five_to_three():
    x = np.array([1.0, 2, 3, 4, 5]).reshape(1, 1, 1, 5)
    out = ops.adaptive_avg_pool3d(Tensor(x), (1, 1, 3)).data.ravel()
    np.testing.assert_allclose(out, [1.5, 3.0, 4.5])
    np.testing.assert_allclose(adaptive_pool_3d(x, (1, 1, 3)).ravel(), [1.5, 3.0, 4.5])


def test_adaptive_pool_identity_and_global_mean():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
    assert ops.adaptive_avg_pool3d(Tensor(x), (3, 4, 5)).data is x or \
        np.array_equal(ops.adaptive_avg_pool3d(Tensor(x), (3, 4, 5)).data, x)
    np.testing.assert_allclose(ops.adaptive_avg_pool3d(Tensor(np.ones((1, 3, 4, 4))), (1, 1, 1)).data, 1.0)


@given(st.tuples(*(st.integers(1, 7) for _ in range(3))), st.tuples(*(st.integers(1, 7) for _ in range(3))),
       st.integers(0, 2**31))
def test_adaptive_pool_matches_window_rule(src, dst, seed):
    x = np.random.default_rng(seed).normal(size=(2,) + src)
    out = ops.adaptive_avg_pool3d(Tensor(x), dst).data
    assert out.shape == (2,) + dst
    np.testing.assert_allclose(out, adaptive_pool_3d(x, dst), rtol=1e-10, atol=1e-12)


@given(st.tuples(*(st.integers(1, 3) for _ in range(3))), st.tuples(*(st.integers(1, 3) for _ in range(3))))
def test_adaptive_pool_preserves_mean_when_dividing(target, factor):
    src = tuple(t * f for t, f in zip(target, factor))
    x = np.random.default_rng(1).normal(size=(1,) + src)
    out = ops.adaptive_avg_pool3d(Tensor(x), target).data
    assert out.mean() == pytest.approx(x.mean(), abs=1e-12)


def test_adaptive_pool_gradient():
    x = np.random.default_rng(8).normal(size=(2, 3, 5, 4))
    assert numeric_grads(lambda t: ops.adaptive_avg_pool3d(t, (4, 3, 6)), [x]) < 1e-6


# ---------------------------------------------------------------- connectives and loss

def test_add_same_shape():
    a, b = np.ones((1, 3, 8, 8)), np.full((1, 3, 8, 8), 2.0)
    for target in ("First", "Second"):
        np.testing.assert_array_equal(ops.connective("Add", Tensor(a), Tensor(b), target).data, 3.0)


def test_concat_coerces_spatial_only():
    a = Tensor(np.zeros((1, 12, 32, 32)))
    b = Tensor(np.ones((1, 1, 64, 64)))
    out = ops.connective(ConnectiveKind.CONCAT, a, b, "First")
    assert out.shape == (1, 13, 32, 32)
    np.testing.assert_array_equal(out.data[:, 12], 1.0)


def test_mul_by_ones():
    x = np.random.default_rng(0).normal(size=(1, 2, 3, 3))
    np.testing.assert_array_equal(ops.connective("Mul", Tensor(x), Tensor(np.ones_like(x))).data, x)


def test_resize_to_second_takes_second_shape():
    out = ops.connective("Mul", Tensor(np.ones((1, 4, 8, 8))), Tensor(np.ones((1, 2, 2, 2))), "Second")
    assert out.shape == (1, 2, 2, 2)


@pytest.mark.parametrize("kind", list(ConnectiveKind))
@pytest.mark.parametrize("target", ["First", "Second"])
def test_connective_gradients(kind, target):
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 2, 2, 3))
    assert numeric_grads(lambda a, b: ops.connective(kind, a, b, target), [a, b]) < 1e-6


def test_mse_examples():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    assert ops.mse_loss(Tensor(x), x).data == 0.0
    assert float(ops.mse_loss(Tensor(x + 0.5), x).data) == pytest.approx(0.25)
    y = np.random.default_rng(1).normal(size=x.shape)
    total = 0.0
    for idx in np.ndindex(x.shape):
        total += (x[idx] - y[idx]) ** 2
    assert float(ops.mse_loss(Tensor(x), y).data) == pytest.approx(total / x.size, abs=1e-12)


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.mse_loss(Tensor(np.zeros((1, 3))), np.zeros((1, 4)))


def test_mse_gradient():
    rng = np.random.default_rng(10)
    y = rng.normal(size=(2, 3, 2, 2))
    assert numeric_grads(lambda p: ops.mse_loss(p, y), [rng.normal(size=y.shape)]) < 1e-6
