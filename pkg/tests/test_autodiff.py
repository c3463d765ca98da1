import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canopyseg import autodiff as ad
from canopyseg.errors import ArgumentError, ShapeError, StateError

from conftest import central_difference, rel_error


def grad_of(build, *tensors):
    with ad.Tape() as tape:
        loss = build()
    tape.backward(loss)
    return [t.grad for t in tensors]


def check_gradient(build, tensors, tol=1e-4):
    analytic = grad_of(build, *tensors)
    for t, a in zip(tensors, analytic):
        numeric = central_difference(lambda: build().item(), t.data)
        assert rel_error(a, numeric) < tol


def away_from_zero(rng, shape, gap=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * (gap + np.abs(x)), x)


# conv2d ---------------------------------------------------------------------------

def test_conv_identity_kernel(backend, rng):
    x = ad.Tensor(rng.standard_normal((2, 1, 6, 5)))
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    out = ad.conv2d(x, w, np.zeros(1, np.float32))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_ones_kernel_on_constant(backend):
    # brute-force padded sums: interior sees 9 ones, edges 6, corners 4
    x = np.ones((1, 1, 5, 5), np.float32)
    out = ad.conv2d(x, np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32)).data[0, 0]
    xp = np.pad(x[0, 0], 1)
    expected = np.array([[xp[i:i + 3, j:j + 3].sum() for j in range(5)] for i in range(5)])
    np.testing.assert_array_equal(out, expected)
    assert out[2, 2] == 9 and out[0, 0] == 4 and out[0, 2] == 6


def test_conv_gradient_constant_input(backend, f64, rng):
    x = ad.Tensor(np.full((1, 2, 5, 5), 0.7), requires_grad=True)
    w = ad.Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    check_gradient(lambda: ad.tensor_sum(ad.conv2d(x, w, b)), [x, w, b], tol=1e-6)


@pytest.mark.parametrize("k", [1, 3])
def test_conv_gradient_random(backend, f64, rng, k):
    x = ad.Tensor(rng.standard_normal((2, 3, 6, 4)), requires_grad=True)
    w = ad.Tensor(rng.standard_normal((2, 3, k, k)), requires_grad=True)
    b = ad.Tensor(rng.standard_normal(2), requires_grad=True)
    proj = rng.standard_normal((2, 2, 6, 4))
    check_gradient(lambda: ad.tensor_sum(ad.mul(ad.conv2d(x, w, b), proj)), [x, w, b])


def test_conv_shape_errors():
    x = np.zeros((1, 2, 4, 4), np.float32)
    with pytest.raises(ShapeError):
        ad.conv2d(x, np.zeros((1, 3, 3, 3), np.float32), np.zeros(1, np.float32))
    with pytest.raises(ShapeError):
        ad.conv2d(x, np.zeros((1, 2, 5, 5), np.float32), np.zeros(1, np.float32))
    with pytest.raises(ShapeError):
        ad.conv2d(x[0], np.zeros((1, 2, 3, 3), np.float32), np.zeros(1, np.float32))


# max_pool2d ---------------------------------------------------------------------------

def test_maxpool_single_window(backend):
    out = ad.max_pool2d(np.array([[[[1, 2], [3, 4]]]], np.float32))
    assert out.data.tolist() == [[[[4.0]]]]


def test_maxpool_ramp(backend):
    ramp = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    windows = [[ramp[0, 0, i:i + 2, j:j + 2].max() for j in (0, 2)] for i in (0, 2)]
    np.testing.assert_array_equal(ad.max_pool2d(ramp).data[0, 0], windows)
    assert windows == [[5, 7], [13, 15]]


def test_maxpool_ties_route_to_first(backend):
    x = ad.Tensor(np.full((1, 2, 4, 4), 3.0), requires_grad=True)
    with ad.Tape() as tape:
        out = ad.max_pool2d(x)
        loss = ad.tensor_sum(out)
    np.testing.assert_array_equal(out.data, 3.0)
    tape.backward(loss)
    expected = np.zeros((4, 4))
    expected[0::2, 0::2] = 1
    np.testing.assert_array_equal(x.grad[0, 0], expected)
    np.testing.assert_array_equal(x.grad[0, 1], expected)


def test_maxpool_gradient(backend, f64, rng):
    x = ad.Tensor(rng.permutation(64).reshape(1, 1, 8, 8) * 0.01, requires_grad=True)  # no ties
    proj = rng.standard_normal((1, 1, 4, 4))
    check_gradient(lambda: ad.tensor_sum(ad.mul(ad.max_pool2d(x), proj)), [x])


def test_maxpool_odd_raises():
    with pytest.raises(ShapeError):
        ad.max_pool2d(np.zeros((1, 1, 3, 4)))


# upsample ---------------------------------------------------------------------------

def test_upsample_replicates():
    assert ad.upsample_nearest2x(np.ones((1, 1, 1, 1))).data[0, 0].tolist() == [[1, 1], [1, 1]]
    out = ad.upsample_nearest2x(np.array([[[[1, 2], [3, 4]]]], np.float32)).data[0, 0]
    np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_upsample_adjoint_sums_four(rng):
    x = ad.Tensor(rng.standard_normal((2, 3, 4, 5)), requires_grad=True)
    (g,) = grad_of(lambda: ad.tensor_sum(ad.upsample_nearest2x(x)), x)
    np.testing.assert_array_equal(g, 4.0)


# activations ----------------------------------------------------------------------

def test_relu_values():
    assert ad.relu(np.array([-1.0, 2.0])).data.tolist() == [0.0, 2.0]


def test_sigmoid_values_and_gradient_at_zero(f64):
    assert ad.sigmoid(np.array([0.0])).data[0] == 0.5
    x = ad.Tensor(np.array([0.0]), requires_grad=True)
    (g,) = grad_of(lambda: ad.tensor_sum(ad.sigmoid(x)), x)
    numeric = central_difference(lambda: ad.sigmoid(x.data).data.sum(), x.data)
    assert g[0] == pytest.approx(0.25, abs=1e-12)
    assert numeric[0] == pytest.approx(0.25, abs=1e-9)


def test_sigmoid_is_stable_for_large_inputs():
    out = ad.sigmoid(np.array([-1000.0, 1000.0], np.float32)).data
    assert np.isfinite(out).all() and out[0] == 0 and out[1] == 1


def test_activation_gradients(f64, rng):
    x = ad.Tensor(away_from_zero(rng, (3, 7)), requires_grad=True)
    proj = rng.standard_normal((3, 7))
    check_gradient(lambda: ad.tensor_sum(ad.mul(ad.relu(x), proj)), [x])
    check_gradient(lambda: ad.tensor_sum(ad.mul(ad.sigmoid(x), proj)), [x])


# dropout ----------------------------------------------------------------------------

def test_dropout_identity_cases(rng):
    x = ad.Tensor(rng.standard_normal((4, 4)))
    assert ad.dropout(x, 0.0, True, 1) is x
    assert ad.dropout(x, 0.9, False, 1) is x


def test_dropout_statistics():
    x = np.ones((200, 100), np.float32)
    out = ad.dropout(x, 0.5, True, 42).data
    kept = out != 0
    assert 0.45 <= kept.mean() <= 0.55
    np.testing.assert_array_equal(out[kept], 2.0)


def test_dropout_deterministic_and_gradient(f64, rng):
    x = ad.Tensor(rng.standard_normal((3, 50)), requires_grad=True)
    np.testing.assert_array_equal(ad.dropout(x, 0.3, True, 9).data, ad.dropout(x, 0.3, True, 9).data)
    proj = x.data.copy()
    check_gradient(lambda: ad.tensor_sum(ad.mul(ad.dropout(x, 0.3, True, 9), proj)), [x])


@pytest.mark.parametrize("p", [1.0, 1.5, -0.1])
def test_dropout_rejects_bad_p(p):
    with pytest.raises(ArgumentError):
        ad.dropout(np.ones(3), p, True, 0)


# concat / slice ---------------------------------------------------------------------

def test_concat_and_slice_round_trip(rng):
    a = ad.Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
    b = ad.Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
    c = ad.concat_channels(a, b)
    assert c.shape == (2, 2, 3, 3)
    np.testing.assert_array_equal(ad.slice_channels(c, 0, 1).data, a.data)
    np.testing.assert_array_equal(ad.slice_channels(c, 1, 2).data, b.data)
    ga, gb = grad_of(lambda: ad.tensor_sum(ad.mul(ad.concat_channels(a, b), np.arange(36.0).reshape(2, 2, 3, 3))), a, b)
    assert ga.shape == a.shape and gb.shape == b.shape
    np.testing.assert_array_equal(ga[:, 0], np.arange(36.0).reshape(2, 2, 3, 3)[:, 0])


def test_concat_shape_error():
    with pytest.raises(ShapeError):
        ad.concat_channels(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 4, 4)))


# bce ------------------------------------------------------------------------------------

def test_bce_perfect_prediction():
    t = np.array([[1.0, 0.0, 1.0, 0.0]], np.float64)
    with ad.precision("float64"):
        loss = ad.bce_loss(t.copy(), t).item()
    assert loss == pytest.approx(-math.log(1 - ad.BCE_EPS), rel=1e-6)
    assert loss == pytest.approx(1e-7, rel=1e-3)


def test_bce_half_is_ln2(f64):
    t = (np.arange(32) % 2).reshape(2, 16).astype(float)
    assert ad.bce_loss(np.full((2, 16), 0.5), t, [3.0, 3.0]).item() == pytest.approx(3 * math.log(2), rel=1e-12)
    assert ad.bce_loss(np.full((1, 16), 0.5), t[:1]).item() == pytest.approx(0.6931, abs=1e-4)


def test_bce_weight_linearity(f64, rng):
    p = rng.uniform(0.1, 0.9, (1, 8))
    t = (rng.random((1, 8)) < 0.5).astype(float)
    assert ad.bce_loss(p, t, [2.0]).item() == pytest.approx(2 * ad.bce_loss(p, t, [1.0]).item(), rel=1e-14)


def test_bce_gradient_direct_and_through_sigmoid(f64, rng):
    t = (rng.random((2, 1, 4, 4)) < 0.4).astype(float)
    w = [1.3, 2.2]
    p = ad.Tensor(rng.uniform(0.05, 0.95, (2, 1, 4, 4)), requires_grad=True)
    check_gradient(lambda: ad.bce_loss(p, t, w), [p])
    z = ad.Tensor(rng.standard_normal((2, 1, 4, 4)), requires_grad=True)
    check_gradient(lambda: ad.bce_loss(ad.sigmoid(z), t, w), [z])


def test_bce_saturated_sigmoid_still_has_gradient():
    z = ad.Tensor(np.array([[40.0, -40.0]], np.float32), requires_grad=True)
    (g,) = grad_of(lambda: ad.bce_loss(ad.sigmoid(z), np.array([[0.0, 1.0]])), z)
    assert g[0, 0] > 0 and g[0, 1] < 0


def test_bce_shape_errors():
    with pytest.raises(ShapeError):
        ad.bce_loss(np.full((1, 4), 0.5), np.zeros((1, 5)))
    with pytest.raises(ShapeError):
        ad.bce_loss(np.full((2, 4), 0.5), np.zeros((2, 4)), [1.0])


# tape --------------------------------------------------------------------------------------

def test_backward_sum_and_square(f64, rng):
    x = ad.Tensor(rng.standard_normal(5), requires_grad=True)
    (g,) = grad_of(lambda: ad.tensor_sum(x), x)
    np.testing.assert_array_equal(g, 1.0)
    (g,) = grad_of(lambda: ad.tensor_sum(ad.mul(x, x)), x)
    np.testing.assert_allclose(g, 2 * x.data, rtol=1e-15)


def test_backward_unreachable_param_gets_zero(rng):
    x = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    unused = ad.Tensor(rng.standard_normal(4), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.tensor_sum(x)
    grads = tape.backward(loss, [x, unused])
    np.testing.assert_array_equal(grads[unused], 0.0)
    assert unused.grad.shape == (4,)


def test_backward_after_clear_raises(rng):
    x = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.tensor_sum(x)
    tape.clear()
    with pytest.raises(StateError):
        tape.backward(loss)


def test_backward_needs_scalar(rng):
    x = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_no_tape_records_nothing(rng):
    x = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    y = ad.tensor_sum(x)
    assert not y.requires_grad
    assert ad.active_tape() is None


def test_shared_input_accumulates(f64, rng):
    x = ad.Tensor(rng.standard_normal(4), requires_grad=True)
    check_gradient(lambda: ad.tensor_sum(ad.add(ad.mul(x, x), x)), [x])


# properties ----------------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 3), c=st.integers(1, 4), f=st.integers(1, 4),
       h=st.integers(1, 5).map(lambda v: 2 * v), w=st.integers(1, 5).map(lambda v: 2 * v))
def test_shape_algebra(n, c, f, h, w):
    x = np.zeros((n, c, h, w), np.float32)
    assert ad.conv2d(x, np.zeros((f, c, 3, 3), np.float32), np.zeros(f, np.float32)).shape == (n, f, h, w)
    assert ad.max_pool2d(x).shape == (n, c, h // 2, w // 2)
    assert ad.upsample_nearest2x(x).shape == (n, c, 2 * h, 2 * w)
    assert ad.concat_channels(x, np.zeros((n, f, h, w), np.float32)).shape == (n, c + f, h, w)
    with pytest.raises(ShapeError):
        ad.conv2d(x, np.zeros((f, c + 1, 3, 3), np.float32), np.zeros(f, np.float32))
    with pytest.raises(ShapeError):
        ad.max_pool2d(np.zeros((n, c, h + 1, w), np.float32))


def test_precision_switch():
    assert ad.default_dtype() == np.float32
    with ad.precision("float64"):
        assert ad.Tensor([1.0]).dtype == np.float64
    assert ad.Tensor([1.0]).dtype == np.float32
    with pytest.raises(ArgumentError):
        ad.set_default_dtype("float16")
