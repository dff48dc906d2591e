import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vsensenet.errors import DimensionError, NonFiniteError, ParameterError
from vsensenet.numerics import (LSTM, Adam, AdamState, Conv2d, ConvTranspose2d, Dense, Dropout, MaxPool2d, Param,
                                ReLU, Sequential, Sigmoid, Tanh, Upsample2d, adam_step, bce_with_logits,
                                check_layer, finite_difference_check, mse_loss)
from vsensenet.numerics import functional as F


def f64(layer):
    return layer.astype(np.float64)


# ---------------------------------------------------------------------------
# Forward oracles
# ---------------------------------------------------------------------------

def naive_conv2d(x, k, b, stride, pad):
    c_out, c_in, kk, _ = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (x.shape[1] + 2 * pad - kk) // stride + 1
    wo = (x.shape[2] + 2 * pad - kk) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + kk, j * stride:j * stride + kk]
                out[o, i, j] = np.sum(patch * k[o]) + b[o]
    return out


def test_conv2d_hand_example():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    k = np.ones((1, 1, 3, 3))
    out = F.conv2d(x, k, np.zeros(1), stride=1, padding=0)
    np.testing.assert_allclose(out, [[[45, 54], [81, 90]]])


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 5), (3, 2, 5)])
def test_conv2d_matches_naive_loop(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + k)
    h = (k - 2 * pad) + 3 * stride  # valid for every stride
    x = rng.normal(size=(2, h, h))
    kern = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    np.testing.assert_allclose(F.conv2d(x, kern, b, stride, pad), naive_conv2d(x, kern, b, stride, pad), atol=1e-12)


def test_conv2d_shape_errors_name_axis():
    with pytest.raises(DimensionError, match="axis C_in"):
        F.conv2d(np.zeros((2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(DimensionError, match="axis H"):
        F.conv2d(np.zeros((1, 6, 7)), np.zeros((1, 1, 3, 3)), np.zeros(1), stride=2, padding=0)
    with pytest.raises(ParameterError):
        F.conv2d(np.zeros((1, 6, 6)), np.zeros((1, 1, 2, 2)), np.zeros(1))


def test_conv_rejects_nonfinite():
    layer = Conv2d(1, 1)
    x = np.zeros((1, 1, 5, 5), dtype=np.float32)
    x[0, 0, 2, 2] = np.nan
    with pytest.raises(NonFiniteError):
        layer.forward(x)


def test_conv_transpose_output_size():
    x = np.ones((1, 2, 5, 5))
    k = np.ones((2, 3, 3, 3))
    assert F.conv_transpose2d(x, k, np.zeros(3), stride=2, padding=1).shape == (1, 3, 9, 9)
    assert F.conv_transpose2d(x, k, np.zeros(3), stride=1, padding=1).shape == (1, 3, 5, 5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 1), st.integers(1, 3), st.integers(1, 3), st.integers(0, 10_000))
def test_conv_transpose_is_adjoint_of_conv(stride, pad, c_in, c_out, seed):
    # <conv(x), y> == <x, conv_transpose(y)> with a shared kernel tensor
    rng = np.random.default_rng(seed)
    k = 3
    h = k - 2 * pad + 2 * stride
    x = rng.normal(size=(1, c_in, h, h))
    kern = rng.normal(size=(c_out, c_in, k, k))
    y_shape = F.conv2d(x, kern, np.zeros(c_out), stride, pad).shape
    y = rng.normal(size=y_shape)
    lhs = np.sum(F.conv2d(x, kern, np.zeros(c_out), stride, pad) * y)
    back = F.conv_transpose2d(y, kern, np.zeros(c_in), stride, pad)
    assert back.shape == x.shape
    assert np.isclose(lhs, np.sum(x * back), rtol=1e-10, atol=1e-10)


def test_maxpool_ties_go_to_first_index():
    x = np.ones((1, 1, 2, 2))
    out, idx = F.maxpool2d(x, 2)
    assert out[0, 0, 0, 0] == 1 and idx[0, 0, 0, 0] == 0
    g = F.maxpool2d_backward(np.ones((1, 1, 1, 1)), idx, 2)
    np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])


def test_maxpool_requires_divisible_size():
    with pytest.raises(DimensionError, match="axis H"):
        F.maxpool2d(np.zeros((1, 1, 5, 4)), 2)


def test_upsample_rejects_fractional_factor():
    with pytest.raises(ParameterError):
        F.upsample2d_nearest(np.zeros((1, 1, 2, 2)), 0)


def test_dropout_is_identity_at_inference_and_inverted_in_training():
    x = np.ones((200, 50))
    out, mask = F.dropout(x, 0.2, False, None)
    assert mask is None and out is x
    out, mask = F.dropout(x, 0.2, True, np.random.default_rng(0))
    assert set(np.unique(out)) <= {0.0, 1.25}
    assert abs(out.mean() - 1.0) < 0.02


def test_flush_subnormal_only_touches_subnormals():
    x = np.array([1e-40, -1e-42, 1e-30, 0.5], dtype=np.float32)
    F.flush_subnormal(x)
    np.testing.assert_array_equal(x, np.array([0, 0, 1e-30, 0.5], dtype=np.float32))


def test_lstm_final_state_matches_sequence():
    rng = np.random.default_rng(1)
    layer = f64(LSTM(3, 5, return_sequence=True, rng=rng))
    x = rng.normal(size=(2, 7, 3))
    hs = layer.forward(x)
    last = f64(LSTM(3, 5, return_sequence=False, rng=np.random.default_rng(1)))
    for p, q in zip(layer.parameters(), last.parameters()):
        q.data = p.data.copy()
    np.testing.assert_allclose(last.forward(x), hs[:, -1])


def test_lstm_zero_weights_give_known_state():
    # all gates sigmoid(0) = 0.5, candidate tanh(0) = 0 -> c and h stay 0
    layer = f64(LSTM(2, 3))
    for p in layer.parameters():
        p.data[:] = 0
    assert np.all(layer.forward(np.ones((1, 4, 2))) == 0)


# ---------------------------------------------------------------------------
# Gradient checks: >= 20 random trials per layer, float64, tolerance 1e-4
# ---------------------------------------------------------------------------

GRAD_TOL = 1e-4
TRIALS = 20


def _layer_cases():
    yield "conv2d", lambda r: (f64(Conv2d(2, 3, 3, rng=r)), r.normal(size=(2, 2, 5, 5)))
    yield "conv2d_stride2", lambda r: (f64(Conv2d(2, 2, 3, stride=2, rng=r)), r.normal(size=(1, 2, 7, 7)))
    yield "conv_transpose2d", lambda r: (f64(ConvTranspose2d(2, 3, 3, rng=r)), r.normal(size=(2, 2, 4, 4)))
    yield "conv_transpose2d_stride2", lambda r: (f64(ConvTranspose2d(2, 2, 3, stride=2, rng=r)),
                                                 r.normal(size=(1, 2, 3, 3)))
    # distinct values keep the max unambiguous under perturbation
    yield "maxpool2d", lambda r: (MaxPool2d(2), r.permutation(64).reshape(1, 1, 8, 8) * 0.1)
    yield "upsample2d", lambda r: (Upsample2d(2), r.normal(size=(1, 2, 3, 3)))
    yield "dense", lambda r: (f64(Dense(6, 4, rng=r)), r.normal(size=(3, 6)))
    yield "lstm_sequence", lambda r: (f64(LSTM(3, 4, True, rng=r)), r.normal(size=(2, 5, 3)))
    yield "lstm_last", lambda r: (f64(LSTM(3, 4, False, rng=r)), r.normal(size=(2, 5, 3)))
    yield "relu", lambda r: (ReLU(), r.normal(size=(4, 6)) + np.sign(r.normal(size=(4, 6))) * 0.1)
    yield "sigmoid", lambda r: (Sigmoid(), r.normal(size=(4, 6)) * 3)
    yield "tanh", lambda r: (Tanh(), r.normal(size=(4, 6)) * 2)


@pytest.mark.parametrize("name,make", list(_layer_cases()))
def test_layer_gradients(name, make):
    worst = 0.0
    for trial in range(TRIALS):
        rng = np.random.default_rng(1000 + trial)
        layer, x = make(rng)
        worst = max(worst, check_layer(layer, x.astype(np.float64), rng))
    assert worst < GRAD_TOL, f"{name}: max relative error {worst:.2e}"


def test_mse_loss_gradient():
    worst = 0.0
    for trial in range(TRIALS):
        rng = np.random.default_rng(trial)
        pred, target = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
        op = lambda a: (mse_loss(a[0], target)[0], [mse_loss(a[0], target)[1]])
        worst = max(worst, finite_difference_check(op, [pred]))
    assert worst < GRAD_TOL


def test_bce_gradient():
    worst = 0.0
    for trial in range(TRIALS):
        rng = np.random.default_rng(trial)
        logits = rng.normal(size=16) * 4
        labels = rng.integers(0, 2, size=16).astype(np.float64)
        op = lambda a: (bce_with_logits(a[0], labels)[0], [bce_with_logits(a[0], labels)[1]])
        worst = max(worst, finite_difference_check(op, [logits]))
    assert worst < GRAD_TOL


def test_sequential_tap_gradient_enters_at_tap():
    rng = np.random.default_rng(3)
    net = Sequential([f64(Dense(4, 5, rng=rng)), Tanh(), f64(Dense(5, 2, rng=rng))])
    net.tap_index = 1
    x = rng.normal(size=(3, 4))
    u, v = rng.normal(size=(3, 2)), rng.normal(size=(3, 5))

    def op(arrays):
        out = net.forward(arrays[0])
        val = float(np.sum(u * out) + np.sum(v * net.tapped))
        for p in net.parameters():
            p.zero_grad()
        return val, [net.backward(u, tap_grad=v)] + [p.grad.copy() for p in net.parameters()]

    assert finite_difference_check(op, [x] + [p.data for p in net.parameters()]) < GRAD_TOL


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def test_bce_is_stable_for_large_logits():
    value, grad = bce_with_logits(np.array([1000.0, -1000.0]), np.array([1.0, 0.0]))
    assert value == 0.0 and np.all(np.isfinite(grad))
    value, _ = bce_with_logits(np.array([1000.0]), np.array([0.0]))
    assert np.isclose(value, 1000.0)


def test_bce_rejects_bad_labels_and_shapes():
    with pytest.raises(ParameterError):
        bce_with_logits(np.zeros(3), np.array([0, 1, 2]))
    with pytest.raises(DimensionError):
        bce_with_logits(np.zeros(3), np.zeros(4))


def test_mse_value():
    value, grad = mse_loss(np.array([1.0, 3.0]), np.array([0.0, 0.0]))
    assert value == 5.0
    np.testing.assert_allclose(grad, [1.0, 3.0])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_single_step_oracle():
    # f(w) = w^2 at w = 1: g = 2, m = 0.2, v = 0.004, m_hat = 2, v_hat = 4
    w = np.array([1.0])
    adam_step([w], [np.array([2.0])], AdamState(lr=0.001))
    expected = 1.0 - 0.001 * 2.0 / (np.sqrt(4.0) + 1e-8)
    assert abs(w[0] - expected) < 1e-9


def test_adam_two_steps_match_closed_form():
    w = np.array([1.0])
    st_ = AdamState()
    m = v = 0.0
    ref = 1.0
    for t in (1, 2):
        g = 2 * w[0]
        adam_step([w], [np.array([g])], st_)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.001 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(w[0] - ref) < 1e-12


def test_adam_validates():
    with pytest.raises(ParameterError):
        AdamState(lr=0)
    with pytest.raises(ParameterError):
        AdamState(beta1=1.0)
    st_ = AdamState()
    adam_step([np.zeros(2)], [np.zeros(2)], st_)
    with pytest.raises(DimensionError):
        adam_step([np.zeros(3)], [np.zeros(3)], st_)


def test_adam_optimizer_descends_quadratic():
    p = Param(np.array([3.0, -2.0]))
    opt = Adam([p], lr=0.05)
    for _ in range(500):
        opt.zero_grad()
        p.grad += 2 * p.data
        opt.step()
    assert np.all(np.abs(p.data) < 0.05)


def test_dropout_layer_backward_uses_mask():
    layer = Dropout(0.5)
    x = np.ones((4, 10))
    out = layer.forward(x, training=True, rng=np.random.default_rng(0))
    g = layer.backward(np.ones_like(x))
    np.testing.assert_array_equal(g, out)
