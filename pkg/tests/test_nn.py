import math

import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st
from scipy import special

from branchkit import autodiff as ad
from branchkit.autodiff import ShapeError, Tensor
from branchkit.nn import (
    BatchNormParams,
    DepthwiseConvParams,
    LayerNormParams,
    LinearParams,
    batch_norm,
    conv2d_subsample,
    depthwise_conv1d,
    dropout,
    gelu,
    glu,
    init_batch_norm,
    init_depthwise,
    init_layer_norm,
    init_linear,
    init_subsampling,
    layer_norm,
    lengths_to_mask,
    linear,
    load_state,
    named_parameters,
    named_tensors,
    parameter_count,
    pointwise_conv,
    save_state,
    subsampled_length,
    swish,
)


def lin(weight, bias=None):
    return LinearParams(ad.parameter(weight), None if bias is None else ad.parameter(bias))


def phi(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# linear / pointwise


def test_linear_identity():
    assert linear(Tensor([1.0, 0.0]), lin(np.eye(2), np.zeros(2))).data.tolist() == [1.0, 0.0]


def test_linear_example():
    out = linear(Tensor([1.0, 1.0]), lin([[1.0, 2.0], [3.0, 4.0]], [1.0, 1.0]))
    assert out.data.tolist() == [5.0, 7.0]


def test_linear_width_mismatch():
    with pytest.raises(ShapeError):
        linear(Tensor(np.ones(3)), lin(np.eye(2)))


def test_linear_params_validate_bias_length():
    with pytest.raises(ShapeError):
        lin(np.ones((2, 3)), np.ones(2))


def test_pointwise_is_linear_bit_for_bit(rng):
    p = init_linear(rng, 5, 3)
    x = rng.normal(size=(2, 7, 5))
    assert np.array_equal(pointwise_conv(x, p).data, linear(x, p).data)
    ident = lin(np.eye(5), np.zeros(5))
    assert np.array_equal(pointwise_conv(x, ident).data, x)


def test_linear_gradcheck(rng):
    p = init_linear(rng, 4, 3)
    x = ad.Tensor(rng.normal(size=(2, 4)))
    w = rng.normal(size=(2, 3))
    assert ad.grad_check(lambda: ad.reduce_sum(linear(x, p) * w), [x, p.weight, p.bias]) < 1e-6


# ---------------------------------------------------------------------------
# activations


def test_swish_values(rng):
    assert swish(Tensor(0.0)).item() == 0.0
    assert swish(Tensor(1.0)).item() == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)
    assert swish(Tensor(1.0)).item() == pytest.approx(0.731058, abs=1e-6)
    x = rng.normal(size=50)
    np.testing.assert_allclose(swish(x).data, x * special.expit(x), atol=1e-15)


def test_gelu_exact_erf_form():
    assert gelu(Tensor(0.0)).item() == 0.0
    assert gelu(Tensor(1.0)).item() == pytest.approx(phi(1.0), abs=1e-15)
    assert gelu(Tensor(-1.0)).item() == pytest.approx(-phi(-1.0), abs=1e-15)
    assert gelu(Tensor(1.0)).item() == pytest.approx(0.841345, abs=1e-6)
    assert gelu(Tensor(-1.0)).item() == pytest.approx(-0.158655, abs=1e-6)
    # the tanh approximation differs at the 1e-4 level
    approx = 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * (1 + 0.044715)))
    assert abs(gelu(Tensor(1.0)).item() - approx) > 1e-5


def test_glu_values(rng):
    assert glu(Tensor([3.0, 0.0])).data.tolist() == [1.5]
    assert glu(Tensor([2.0, 50.0])).item() == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ShapeError):
        glu(Tensor(np.ones(3)))
    x = ad.Tensor(rng.normal(size=(3, 8)))
    w = rng.normal(size=(3, 4))
    assert ad.grad_check(lambda: ad.reduce_sum(glu(x) * w), [x]) < 1e-6


@pytest.mark.parametrize("fn", [swish, gelu])
def test_activation_gradcheck(fn, rng):
    x = ad.Tensor(rng.normal(size=(4, 5)))
    w = rng.normal(size=(4, 5))
    assert ad.grad_check(lambda: ad.reduce_sum(fn(x) * w), [x]) < 1e-6


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_examples():
    p = init_layer_norm(4)
    assert np.abs(layer_norm(Tensor(np.full(4, 3.0)), p).data).max() == 0.0
    p2 = init_layer_norm(2)
    np.testing.assert_allclose(layer_norm(Tensor([1.0, -1.0]), p2).data, [1.0, -1.0], atol=1e-11)
    shift_only = LayerNormParams(ad.parameter(np.zeros(3)), ad.parameter([0.5, -1.0, 2.0]))
    assert layer_norm(Tensor([4.0, 1.0, 9.0]), shift_only).data.tolist() == [0.5, -1.0, 2.0]


def test_layer_norm_eps_must_be_positive():
    with pytest.raises(ValueError):
        LayerNormParams(ad.parameter(np.ones(2)), ad.parameter(np.zeros(2)), eps=0.0)


@given(st.integers(0, 10_000), st.integers(2, 8))
@example(1115, 2)
def test_layer_norm_standardizes(seed, d):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=rng.uniform(0.1, 10), size=(3, d)) + rng.normal(size=(3, 1)) * 5
    if np.any(x.var(-1) <= 1e-6):
        return
    p = init_layer_norm(d)
    y = layer_norm(x, p).data
    var = x.var(-1)
    assert np.abs(y.mean(-1)).max() < 1e-8
    # eps sits inside the square root, so the output variance is var / (var + eps)
    assert np.abs(y.var(-1) - var / (var + p.eps)).max() < 1e-8
    wide = var >= 1e-4
    assert np.abs(y.var(-1)[wide] - 1).max(initial=0.0) < 1e-8


def test_layer_norm_variance_near_the_floor():
    # just above an input variance of 1e-6, eps=1e-12 still costs 1e-6 of output variance
    x = np.array([[1e-3, -1e-3]]) * 1.0001
    p = init_layer_norm(2)
    y = layer_norm(x, p).data
    var = x.var(-1)
    assert abs(y.var(-1)[0] - var[0] / (var[0] + p.eps)) < 1e-15
    assert 9e-7 < 1 - y.var(-1)[0] < 1e-6


# ---------------------------------------------------------------------------
# batch norm


def test_batch_norm_eval_identity(rng):
    x = rng.normal(size=(2, 5, 3))
    p = init_batch_norm(3)
    p.eps = 1e-300
    np.testing.assert_allclose(batch_norm(x, p, "eval").data, x, rtol=1e-15)


def test_batch_norm_single_valid_frame_gives_zero(rng):
    x = rng.normal(size=(1, 4, 3))
    mask = np.array([[True, False, False, False]])
    y = batch_norm(x, init_batch_norm(3), "train", mask).data
    assert np.abs(y[0, 0]).max() == 0.0


def test_batch_norm_no_valid_frames():
    with pytest.raises(ValueError):
        batch_norm(np.ones((1, 3, 2)), init_batch_norm(2), "train", np.zeros((1, 3), bool))


def test_batch_norm_statistics_ignore_padding(rng):
    x = rng.normal(size=(2, 6, 3))
    mask = lengths_to_mask([6, 3])
    garbage = x.copy()
    garbage[1, 3:] = rng.normal(scale=1e3, size=(3, 3))
    pa, pb = init_batch_norm(3), init_batch_norm(3)
    ya = batch_norm(x, pa, "train", mask).data
    yb = batch_norm(garbage, pb, "train", mask).data
    assert np.abs(ya[mask] - yb[mask]).max() <= 1e-10
    assert np.array_equal(pa.running_mean.data, pb.running_mean.data)
    assert np.array_equal(pa.running_var.data, pb.running_var.data)


def test_batch_norm_train_standardizes_valid_frames(rng):
    x = rng.normal(loc=3.0, scale=2.0, size=(3, 10, 4))
    mask = lengths_to_mask([10, 7, 2])
    sigma2 = x[mask].var(0)

    p = init_batch_norm(4)
    y = batch_norm(x, p, "train", mask).data[mask]
    assert np.abs(y.mean(0)).max() < 1e-6
    np.testing.assert_allclose(y.var(0), sigma2 / (sigma2 + p.eps), rtol=1e-12)

    tight = init_batch_norm(4)
    tight.eps = 1e-12
    y = batch_norm(x, tight, "train", mask).data[mask]
    assert np.abs(y.mean(0)).max() < 1e-6
    assert np.abs(y.var(0) - 1).max() < 1e-6


def test_batch_norm_running_stats_update(rng):
    x = rng.normal(size=(2, 5, 3))
    p = init_batch_norm(3)
    batch_norm(x, p, "train")
    flat = x.reshape(-1, 3)
    np.testing.assert_allclose(p.running_mean.data, 0.1 * flat.mean(0), atol=1e-15)
    np.testing.assert_allclose(p.running_var.data, 0.9 + 0.1 * flat.var(0, ddof=1), atol=1e-15)


def test_batch_norm_param_validation():
    with pytest.raises(ValueError):
        BatchNormParams(*(ad.parameter(np.ones(2)) for _ in range(2)), Tensor(np.zeros(2)), Tensor(np.ones(2)),
                        momentum=1.5)
    with pytest.raises(ValueError):
        BatchNormParams(*(ad.parameter(np.ones(2)) for _ in range(2)), Tensor(np.zeros(2)), Tensor(-np.ones(2)))


# ---------------------------------------------------------------------------
# depthwise convolution


def test_depthwise_delta_kernel_is_identity(rng):
    for k in (1, 3, 5, 31):
        kernel = np.zeros((4, k))
        kernel[:, k // 2] = 1.0
        p = DepthwiseConvParams(ad.parameter(kernel), ad.parameter(np.zeros(4)))
        x = rng.normal(size=(2, 9, 4))
        assert np.array_equal(depthwise_conv1d(x, p).data, x)


def test_depthwise_impulse_spreads():
    p = DepthwiseConvParams(ad.parameter(np.ones((1, 3))), None)
    x = np.zeros((1, 6, 1))
    x[0, 2, 0] = 1.0
    assert depthwise_conv1d(x, p).data[0, :, 0].tolist() == [0.0, 1.0, 1.0, 1.0, 0.0, 0.0]


def test_depthwise_even_kernel_rejected():
    with pytest.raises(ShapeError):
        DepthwiseConvParams(ad.parameter(np.ones((2, 4))), None)


def test_depthwise_is_cross_correlation():
    p = DepthwiseConvParams(ad.parameter([[1.0, 2.0, 3.0]]), None)
    x = np.arange(1.0, 6.0).reshape(1, 5, 1)
    # out[t] = 1*x[t-1] + 2*x[t] + 3*x[t+1]
    assert depthwise_conv1d(x, p).data[0, :, 0].tolist() == [8.0, 14.0, 20.0, 26.0, 14.0]


def test_depthwise_ignores_masked_frames(rng):
    p = init_depthwise(rng, 3, 5)
    mask = lengths_to_mask([8, 5])
    x = rng.normal(size=(2, 8, 3))
    garbage = x.copy()
    garbage[1, 5:] = rng.normal(scale=1e3, size=(3, 3))
    a, b = depthwise_conv1d(x, p, mask).data, depthwise_conv1d(garbage, p, mask).data
    assert np.abs(a[mask] - b[mask]).max() <= 1e-10


def test_depthwise_gradcheck_with_mask(rng):
    p = init_depthwise(rng, 3, 3)
    x = ad.Tensor(rng.normal(size=(2, 5, 3)))
    mask = lengths_to_mask([5, 3])
    w = rng.normal(size=(2, 5, 3))
    f = lambda: ad.reduce_sum(depthwise_conv1d(x, p, mask) * w)  # noqa: E731
    assert ad.grad_check(f, [x, p.kernel, p.bias]) < 1e-6


# ---------------------------------------------------------------------------
# dropout


def test_dropout_identity_cases(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    assert dropout(x, 0.0, "train", rng) is x
    assert dropout(x, 0.7, "eval", rng) is x
    with pytest.raises(ValueError):
        dropout(x, 1.0, "train", rng)


def test_dropout_is_unbiased(rng):
    out = dropout(Tensor(np.ones(100_000)), 0.3, "train", rng).data
    assert abs(out.mean() - 1.0) < 0.02
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.7}


# ---------------------------------------------------------------------------
# subsampling


def test_subsampled_length_examples():
    assert subsampled_length(1000) == 249
    assert subsampled_length(80) == 19
    assert subsampled_length(7) == 1
    lengths = np.arange(7, 400)
    assert np.all(np.diff(subsampled_length(lengths)) >= 0)


def test_subsample_shapes_and_lengths(rng):
    p = init_subsampling(rng, 80, 8)
    feats = rng.normal(size=(2, 60, 80))
    out, lengths = conv2d_subsample(feats, [60, 31], p)
    assert out.shape == (2, subsampled_length(60), 8)
    assert lengths.tolist() == [subsampled_length(60), subsampled_length(31)]
    assert p.out.weight.shape == (8 * 19, 8)


def test_subsample_rejects_short_input(rng):
    p = init_subsampling(rng, 20, 4)
    with pytest.raises(ShapeError):
        conv2d_subsample(rng.normal(size=(1, 6, 20)), [6], p)
    out, lengths = conv2d_subsample(rng.normal(size=(1, 7, 20)), [7], p)
    assert out.shape[1] == 1 and lengths.tolist() == [1]


def test_subsample_valid_frames_ignore_padding(rng):
    p = init_subsampling(rng, 11, 4)
    feats = rng.normal(size=(2, 40, 11))
    garbage = feats.copy()
    garbage[1, 25:] = rng.normal(scale=1e3, size=(15, 11))
    a, lengths = conv2d_subsample(feats, [40, 25], p)
    b, _ = conv2d_subsample(garbage, [40, 25], p)
    n = int(lengths[1])
    assert np.abs(a.data[1, :n] - b.data[1, :n]).max() <= 1e-10


def test_subsample_gradcheck(rng):
    p = init_subsampling(rng, 9, 3)
    x = ad.Tensor(rng.normal(size=(1, 11, 9)))
    w = rng.normal(size=(1, 1, 3))
    inputs = [x] + [t for _, t in named_parameters(p)]
    assert ad.grad_check(lambda: ad.reduce_sum(conv2d_subsample(x, [11], p)[0] * w), inputs) < 1e-4


# ---------------------------------------------------------------------------
# parameter bookkeeping and serialization


def test_parameter_count_examples(rng):
    assert parameter_count(init_linear(rng, 4, 8)) == 40
    assert parameter_count(init_layer_norm(256)) == 512


def test_save_load_round_trip(tmp_path, rng):
    src = {"lin": init_linear(rng, 3, 4), "bn": init_batch_norm(4), "f32": init_linear(rng, 2, 2, dtype=np.float32)}
    src["bn"].running_var.data[...] = rng.uniform(size=4)
    manifest = save_state(src, tmp_path)
    dst = {"lin": init_linear(rng, 3, 4), "bn": init_batch_norm(4), "f32": init_linear(rng, 2, 2, dtype=np.float32)}
    load_state(dst, tmp_path)
    assert np.array_equal(dst["lin"].weight.data, src["lin"].weight.data)
    assert np.array_equal(dst["bn"].running_var.data, src["bn"].running_var.data)
    assert dst["f32"].weight.dtype == np.float32

    import json

    entries = json.loads(manifest.read_text())["tensors"]
    assert {"name", "shape", "dtype", "offset", "nbytes"} <= set(entries[0])
    blob = (tmp_path / "params.bin").read_bytes()
    first = entries[0]
    raw = np.frombuffer(blob, dtype="<f8", count=int(np.prod(first["shape"])), offset=first["offset"])
    assert np.array_equal(raw.reshape(first["shape"]), dict(named_tensors(src))[first["name"]].data)


def test_load_state_rejects_mismatch(tmp_path, rng):
    save_state({"lin": init_linear(rng, 3, 4)}, tmp_path)
    with pytest.raises(ShapeError):
        load_state({"lin": init_linear(rng, 4, 4)}, tmp_path)
    with pytest.raises(KeyError):
        load_state({"lin": init_linear(rng, 3, 4), "extra": init_layer_norm(2)}, tmp_path)
