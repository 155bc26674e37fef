import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from antidote.attention import PruneMask, apply_mask, random_criterion
from antidote.layers import (
    Conv2d,
    CosineSchedule,
    Dense,
    DynamicPrune,
    GlobalAvgPool,
    MaxPool2x2,
    ReLU,
    SoftmaxCrossEntropy,
    StateError,
    conv2d_forward,
    conv2d_forward_masked,
    cosine_lr,
    sgd_step,
)
from antidote.tensor import ShapeError
from helpers import layer_grad_errors, model_grad_errors, naive_conv, random_layer_case, softmax_xent_grad_error


# -- convolution -------------------------------------------------------------

def test_conv_1x1_example():
    out = conv2d_forward(np.full((1, 1, 1, 1), 3.0, np.float32), np.full((1, 1, 1, 1), 2.0, np.float32),
                         np.ones(1, np.float32), padding=0)
    assert out.tolist() == [[[[7.0]]]]


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 4)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(conv2d_forward(x, w, np.zeros(1, np.float32), padding=1), x)
    np.testing.assert_array_equal(conv2d_forward(x, w, np.zeros(1, np.float32), padding=0), x[:, :, 1:-1, 1:-1])


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_naive_loops(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((1, 3, 5, 5)).astype(np.float32)
    w = r.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = r.standard_normal(4).astype(np.float32)
    for pad in (0, 1):
        np.testing.assert_allclose(conv2d_forward(x, w, b, pad), naive_conv(x, w, b, pad), atol=1e-5)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d_forward(np.ones((1, 2, 3, 3), np.float32), np.ones((1, 3, 3, 3), np.float32),
                       np.zeros(1, np.float32))


def test_conv_layer_kaiming_init():
    layer = Conv2d(64, 128, rng=np.random.default_rng(0))
    std = layer.params["weight"].std()
    assert abs(std - math.sqrt(2 / (64 * 9))) / std < 0.05
    assert np.all(layer.params["bias"] == 0)


# -- masked convolution ------------------------------------------------------

def _masked_case(r, n=1):
    c, f = int(r.integers(1, 6)), int(r.integers(1, 5))
    h, w = int(r.integers(1, 7)), int(r.integers(1, 7))
    x = r.standard_normal((n, c, h, w)).astype(np.float32)
    wt = r.standard_normal((f, c, 3, 3)).astype(np.float32)
    b = r.standard_normal(f).astype(np.float32)
    ch = r.random((n, c)) < r.uniform(0.2, 1.0)
    sp = r.random((n, h, w)) < r.uniform(0.2, 1.0)
    return x, wt, b, ch, sp


def test_masked_conv_all_true_equals_dense(rng):
    x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out, macs = conv2d_forward_masked(x, w, b, np.ones(3, bool), np.ones((6, 5), bool))
    np.testing.assert_allclose(out, conv2d_forward(x, w, b, 1), atol=1e-5)
    assert macs == 2 * 4 * 3 * 9 * 6 * 5


def test_masked_conv_half_channels(rng):
    x = rng.standard_normal((1, 4, 5, 5)).astype(np.float32)
    w = rng.standard_normal((3, 4, 3, 3)).astype(np.float32)
    b = np.zeros(3, np.float32)
    ch, sp = np.array([True, False, True, False]), np.ones((5, 5), bool)
    out, macs = conv2d_forward_masked(x, w, b, ch, sp)
    ref = conv2d_forward(apply_mask(x, PruneMask(ch, sp)), w, b, 1)
    np.testing.assert_allclose(out, ref, atol=1e-5)
    assert macs == 3 * 2 * 25 * 9


def test_masked_conv_single_column(rng):
    x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
    w = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    sp = np.zeros((4, 4), bool)
    sp[1, 2] = True
    out, macs = conv2d_forward_masked(x, w, b, np.ones(2, bool), sp)
    ref = conv2d_forward(apply_mask(x, PruneMask(np.ones(2, bool), sp)), w, b, 1)
    np.testing.assert_allclose(out, ref, atol=1e-5)
    assert macs == 2 * 2 * 1 * 9


@given(st.integers(0, 2**31))
def test_masked_conv_equivalence_property(seed):
    r = np.random.default_rng(seed)
    x, w, b, ch, sp = _masked_case(r, n=int(r.integers(1, 3)))
    out, macs = conv2d_forward_masked(x, w, b, ch, sp)
    ref = conv2d_forward(apply_mask(x, PruneMask(ch, sp)), w, b, 1)
    np.testing.assert_allclose(out, ref, atol=1e-5)
    f = w.shape[0]
    assert macs == sum(f * int(ch[s].sum()) * int(sp[s].sum()) * 9 for s in range(x.shape[0]))


def test_masked_conv_rejects_valid_padding():
    with pytest.raises(ShapeError):
        conv2d_forward_masked(np.ones((1, 1, 3, 3), np.float32), np.ones((1, 1, 3, 3), np.float32),
                              np.zeros(1, np.float32), np.ones(1, bool), np.ones((3, 3), bool), padding=0)


# -- dynprune ----------------------------------------------------------------

def test_dynprune_disabled_and_full_keep_are_identity(rng):
    x = rng.random((2, 4, 3, 3)).astype(np.float32)
    off = DynamicPrune(0.5, 0.5, enabled=False)
    assert off.forward(x) is x
    g = rng.random(x.shape).astype(np.float32)
    assert off.backward(g) is g
    full = DynamicPrune(1.0, 1.0)
    assert np.array_equal(full.forward(x), x)
    assert np.array_equal(full.backward(g), g)


def test_dynprune_keeps_half_the_channels():
    x = np.ones((1, 4, 2, 2), np.float32) * np.array([1, 4, 2, 3], np.float32).reshape(1, 4, 1, 1)
    out = DynamicPrune(0.5, 1.0).forward(x)
    alive = np.flatnonzero(np.abs(out[0]).sum(axis=(1, 2)))
    assert alive.tolist() == [1, 3]


def test_dynprune_backward_uses_cached_mask(rng):
    layer = DynamicPrune(0.5, 0.5)
    x = rng.random((2, 4, 4, 4)).astype(np.float32)
    layer.forward(x)
    g = layer.backward(np.ones_like(x))
    mask = layer.last_mask
    for s in range(2):
        for c in np.flatnonzero(~mask.channel_mask[s]):
            assert np.all(g[s, c] == 0)
    assert np.array_equal(g, apply_mask(np.ones_like(x), mask))


def test_dynprune_backward_without_forward():
    with pytest.raises(StateError):
        DynamicPrune(0.5, 1.0).backward(np.ones((1, 2, 2, 2)))


def test_dynprune_random_streams_advance(rng):
    layer = DynamicPrune(0.5, 1.0, criterion=random_criterion(0))
    x = rng.random((4, 16, 2, 2)).astype(np.float32)
    layer.forward(x)
    first = layer.last_mask.channel_mask.copy()
    layer.forward(x)
    assert not np.array_equal(first, layer.last_mask.channel_mask)
    layer.reset_stream()
    layer.forward(x)
    assert np.array_equal(first, layer.last_mask.channel_mask)


@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_dynprune_fixed_mask_is_linear(seed, a, b):
    r = np.random.default_rng(seed)
    layer = DynamicPrune()
    layer.fixed_mask = PruneMask(r.random((2, 3)) < 0.5, r.random((2, 4, 4)) < 0.5)
    x, y = r.standard_normal((2, 2, 3, 4, 4))
    np.testing.assert_allclose(layer.forward(a * x + b * y),
                               a * layer.forward(x) + b * layer.forward(y), atol=1e-12)


# -- other layers ------------------------------------------------------------

def test_relu_example():
    layer = ReLU()
    assert layer.forward(np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]
    assert layer.backward(np.array([5.0, 5.0])).tolist() == [0.0, 5.0]


def test_maxpool_tie_routes_to_first():
    layer = MaxPool2x2()
    x = np.ones((1, 1, 2, 2), np.float32)
    assert layer.forward(x).item() == 1.0
    g = layer.backward(np.full((1, 1, 1, 1), 3.0, np.float32))
    assert g[0, 0].tolist() == [[3.0, 0.0], [0.0, 0.0]]


def test_maxpool_odd_dims_rejected():
    with pytest.raises(ShapeError):
        MaxPool2x2().forward(np.ones((1, 1, 3, 2)))


def test_gap_and_dense_shapes(rng):
    x = rng.random((2, 3, 4, 4)).astype(np.float32)
    pooled = GlobalAvgPool().forward(x)
    assert pooled.shape == (2, 3, 1, 1)
    dense = Dense(3, 5, rng=rng)
    assert dense.forward(pooled).shape == (2, 5)
    with pytest.raises(ShapeError):
        Dense(4, 5).forward(pooled)


def test_softmax_xent_uniform_logits():
    loss = SoftmaxCrossEntropy().forward(np.zeros((3, 10), np.float32), np.array([0, 4, 9]))
    assert loss == pytest.approx(math.log(10), abs=1e-6)


def test_softmax_xent_large_logits_are_stable():
    loss = SoftmaxCrossEntropy().forward(np.array([[1000.0, 0.0]]), np.array([0]))
    assert math.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-12)


# -- gradient checks ---------------------------------------------------------

@pytest.mark.parametrize("kind", ["conv", "relu", "maxpool", "gap", "dense", "dynprune"])
@pytest.mark.parametrize("seed", range(3))
def test_layer_gradients(kind, seed):
    r = np.random.default_rng(100 * seed + len(kind))
    layer, x, step = random_layer_case(kind, r)
    errors = layer_grad_errors(layer, x, step, r)
    assert max(errors.values()) < 1e-3, errors


@pytest.mark.parametrize("seed", range(3))
def test_softmax_xent_gradient(seed):
    assert softmax_xent_grad_error(np.random.default_rng(seed)) < 1e-3


def test_end_to_end_gradient():
    errors = model_grad_errors(0)
    assert max(errors.values()) < 1e-3, errors


def test_conv_skips_input_gradient_when_not_needed(rng):
    layer = Conv2d(2, 3, rng=rng)
    layer.need_dx = False
    x = rng.random((1, 2, 4, 4)).astype(np.float32)
    out = layer.forward(x)
    assert np.all(layer.backward(np.ones_like(out)) == 0)
    assert layer.grads["weight"].shape == (3, 2, 3, 3)


def test_conv_backward_before_forward():
    with pytest.raises(StateError):
        Conv2d(1, 1).backward(np.ones((1, 1, 2, 2)))


# -- optimizer & schedule ----------------------------------------------------

def test_cosine_schedule_points():
    s = CosineSchedule(0.1, 100)
    assert cosine_lr(s, 0) == pytest.approx(0.1)
    assert cosine_lr(s, 50) == pytest.approx(0.05)
    assert cosine_lr(s, 100) == pytest.approx(0.0, abs=1e-15)
    lrs = [s(i) for i in range(101)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


@pytest.mark.parametrize("step", [-1, 101])
def test_cosine_out_of_range(step):
    with pytest.raises(ValueError):
        cosine_lr(CosineSchedule(0.1, 100), step)


def test_sgd_step_in_place():
    p = np.array([1.0, 2.0], np.float32)
    sgd_step([p], [np.array([0.5, -1.0], np.float32)], 0.1)
    np.testing.assert_allclose(p, [0.95, 2.1])
