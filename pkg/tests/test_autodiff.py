import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advcam import autodiff as ad
from advcam.errors import DimensionError, GraphStateError, ValidationError
from advcam.model import Architecture, GapClassifier

import oracles


def leaf(a, grad=True):
    g = ad.Graph()
    return g, g.leaf(a, requires_grad=grad)


# ---------------------------------------------------------------- conv2d

def test_conv_all_ones_center():
    g, x = leaf(np.ones((1, 3, 3)))
    out = ad.conv2d(x, g.constant(np.ones((1, 1, 3, 3))), padding=1)
    assert out.data[0, 1, 1] == 9.0


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(2, 5, 6))
    k = np.zeros((2, 2, 3, 3))
    k[0, 0, 1, 1] = k[1, 1, 1, 1] = 1.0
    g, x = leaf(img)
    out = ad.conv2d(x, g.constant(k), padding=1)
    np.testing.assert_array_equal(out.data, img)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_loops(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(2, 5, 5)) if stride == 2 else rng.normal(size=(2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    g, xt = leaf(x)
    out = ad.conv2d(xt, g.constant(w), g.constant(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, oracles.conv2d_loops(x, w, b, stride, padding), atol=1e-12, rtol=0)


def test_conv_batched_equals_single():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 2, 6, 6))
    w = rng.normal(size=(4, 2, 3, 3))
    g = ad.Graph()
    batched = ad.conv2d(g.constant(x), g.constant(w), padding=1).data
    for i in range(3):
        g = ad.Graph()
        np.testing.assert_allclose(batched[i], ad.conv2d(g.constant(x[i]), g.constant(w), padding=1).data,
                                   atol=1e-13, rtol=0)


def test_conv_shape_errors_name_axes():
    g = ad.Graph()
    with pytest.raises(DimensionError, match="channel"):
        ad.conv2d(g.constant(np.ones((2, 4, 4))), g.constant(np.ones((1, 3, 3, 3))))
    with pytest.raises(DimensionError, match="odd"):
        ad.conv2d(g.constant(np.ones((1, 4, 4))), g.constant(np.ones((1, 1, 2, 2))))
    with pytest.raises(DimensionError, match="height"):
        ad.conv2d(g.constant(np.ones((1, 4, 5))), g.constant(np.ones((1, 1, 3, 3))), stride=2)
    with pytest.raises(DimensionError, match="width"):
        ad.conv2d(g.constant(np.ones((1, 5, 4))), g.constant(np.ones((1, 1, 3, 3))), stride=2)


# ------------------------------------------------------------ elementwise

def test_relu_values_and_gradient():
    g, x = leaf(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(ad.relu(x).data, [0.0, 0.0, 2.0])
    g, x = leaf(-np.ones(4))
    np.testing.assert_array_equal(ad.relu(x).data, np.zeros(4))
    g, x = leaf(np.array([-1.0, 2.0]))
    loss = ad.sum_(ad.mul_const(ad.relu(x), np.array([5.0, 5.0])))
    g.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 5.0])


def test_relu_gradient_zero_at_kink():
    g, x = leaf(np.array([0.0]))
    g.backward(ad.sum_(ad.relu(x)))
    assert x.grad[0] == 0.0


def test_abs_subgradient():
    g, x = leaf(np.array([-2.0, 0.0, 3.0]))
    g.backward(ad.sum_(ad.abs_(x)))
    np.testing.assert_array_equal(x.grad, [-1.0, 0.0, 1.0])


def test_masked_sum_and_hflip():
    a = np.arange(6.0).reshape(2, 3)
    m = np.array([[1, 0, 1], [0, 1, 0]], dtype=float)
    g, x = leaf(a)
    s = ad.masked_sum(x, m)
    assert float(s.data) == 0 + 2 + 4
    g.backward(s)
    np.testing.assert_array_equal(x.grad, m)
    g, x = leaf(a)
    f = ad.hflip(x)
    np.testing.assert_array_equal(f.data, a[:, ::-1])
    g.backward(ad.sum_(ad.mul_const(f, np.arange(6.0).reshape(2, 3))))
    np.testing.assert_array_equal(x.grad, np.arange(6.0).reshape(2, 3)[:, ::-1])


# --------------------------------------------------------------- gap etc.

def test_gap_examples():
    g, x = leaf(np.full((1, 3, 3), 4.0))
    assert ad.gap(x).data[0] == 4.0
    g, x = leaf(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    assert ad.gap(x).data[0] == 2.5
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 5, 5))
    g, x = leaf(a)
    np.testing.assert_allclose(ad.gap(x).data, oracles.gap_loops(a), atol=1e-12, rtol=0)


def test_avg_pool_matches_loops():
    a = np.random.default_rng(2).normal(size=(2, 4, 6))
    g, x = leaf(a)
    np.testing.assert_allclose(ad.avg_pool2(x).data, oracles.avg_pool_loops(a), atol=1e-15, rtol=0)


def test_linear_examples():
    rng = np.random.default_rng(3)
    v = rng.normal(size=4)
    b = rng.normal(size=3)
    g, x = leaf(v)
    np.testing.assert_array_equal(ad.linear(x, g.constant(np.zeros((3, 4))), g.constant(b)).data, b)
    g, x = leaf(v)
    np.testing.assert_array_equal(ad.linear(x, g.constant(np.eye(4)), g.constant(np.zeros(4))).data, v)
    w = rng.normal(size=(3, 4))
    g, x = leaf(v)
    np.testing.assert_allclose(ad.linear(x, g.constant(w), g.constant(b)).data, oracles.linear_loops(v, w, b),
                               atol=1e-12, rtol=0)
    with pytest.raises(DimensionError):
        ad.linear(x, g.constant(np.ones((3, 5))), g.constant(b))


# -------------------------------------------------------------------- bce

def test_bce_examples():
    g, z = leaf(np.array([0.0]))
    assert math.isclose(float(ad.sigmoid_bce(z, [1.0]).data), math.log(2), rel_tol=1e-15)
    g, z = leaf(np.array([100.0]))
    val = float(ad.sigmoid_bce(z, [1.0]).data)
    assert 0.0 <= val < 1e-40 and math.isfinite(val)
    g, z = leaf(np.array([1e3, -1e3]))
    assert np.isfinite(ad.sigmoid_bce(z, [0.0, 1.0]).data)


def test_bce_matches_naive():
    rng = np.random.default_rng(4)
    for _ in range(10):
        z = rng.normal(scale=4, size=6)
        t = (rng.random(6) < 0.5).astype(float)
        g, x = leaf(z)
        assert abs(float(ad.sigmoid_bce(x, t).data) - oracles.bce_naive(z, t)) < 1e-10


def test_bce_rejects_soft_targets():
    g, z = leaf(np.zeros(2))
    with pytest.raises(ValidationError):
        ad.sigmoid_bce(z, [0.5, 1.0])


def test_bce_gradient_fd():
    rng = np.random.default_rng(6)
    z0 = rng.normal(size=5)
    t = np.array([1, 0, 1, 1, 0.0])
    g, z = leaf(z0)
    g.backward(ad.sigmoid_bce(z, t))
    fd = oracles.central_diff(lambda v: oracles.bce_naive(v, t), z0)
    np.testing.assert_allclose(z.grad, [fd[i] for i in range(5)], rtol=1e-7)


# ----------------------------------------------------------------- resize

def test_bilinear_matches_loops():
    a = np.random.default_rng(7).normal(size=(5, 4))
    for h, w in [(10, 8), (3, 7), (5, 4), (1, 1)]:
        np.testing.assert_allclose(ad.resize_array(a, h, w), oracles.bilinear_loops(a, h, w), atol=1e-12, rtol=0)


def test_bilinear_resize_gradient_is_transpose():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(4, 3))
    u = rng.normal(size=(8, 6))
    g, x = leaf(a)
    g.backward(ad.sum_(ad.mul_const(ad.bilinear_resize(x, 8, 6), u)))
    fd = oracles.central_diff(lambda v: float((ad.resize_array(v, 8, 6) * u).sum()), a)
    np.testing.assert_allclose(x.grad.ravel(), [fd[i] for i in range(a.size)], rtol=1e-7, atol=1e-9)


# ---------------------------------------------------------------- backward

def test_sum_gradient_all_ones():
    g, x = leaf(np.random.default_rng(9).normal(size=(2, 3)))
    g.backward(ad.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_unreached_leaf_gets_zero_gradient():
    g = ad.Graph()
    x = g.leaf(np.ones(3))
    y = g.leaf(np.ones(2))
    g.backward(ad.sum_(y))
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_backward_twice_raises():
    g, x = leaf(np.ones(2))
    loss = ad.sum_(x)
    g.backward(loss)
    with pytest.raises(GraphStateError):
        g.backward(loss)


def test_non_scalar_loss_rejected():
    g, x = leaf(np.ones(2))
    with pytest.raises(DimensionError):
        g.backward(x)


def test_nonfinite_output_raises():
    g, x = leaf(np.array([1e308]))
    with pytest.raises(ad.NonFiniteError), np.errstate(over="ignore"):
        ad.scale(x, 10.0)


def test_linearity_of_backward():
    rng = np.random.default_rng(10)
    m = GapClassifier.initialize(Architecture(), seed=3)
    img = rng.random((3, 16, 16))
    u1, u2 = rng.normal(size=4), rng.normal(size=4)

    def grad(coef):
        g = ad.Graph()
        x = g.leaf(img)
        logits, _ = m.forward(x)
        g.backward(ad.sum_(ad.mul_const(logits, coef)))
        return x.grad

    a, b = 0.7, -1.3
    np.testing.assert_allclose(grad(a * u1 + b * u2), a * grad(u1) + b * grad(u2), atol=1e-12, rtol=0)


def test_determinism_bit_identical():
    m = GapClassifier.initialize(Architecture(), seed=1)
    img = np.random.default_rng(11).random((3, 16, 16))

    def run():
        g = ad.Graph()
        x = g.leaf(img)
        logits, _ = m.forward(x)
        loss = ad.sigmoid_bce(logits, [1, 0, 1, 0])
        g.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes()

    assert run() == run()


def _fd_check_model(seed):
    rng = np.random.default_rng(seed)
    m = GapClassifier.initialize(Architecture(widths=(4, 6, 8), feature_dim=8), seed=seed)
    for k in m.params:
        if k.endswith(".b"):
            m.params[k] = rng.normal(scale=0.1, size=m.params[k].shape)
    img = rng.random((3, 16, 16))
    t = (rng.random(4) < 0.5).astype(float)

    def loss_of(x):
        return _loss(m, x, t)

    g = ad.Graph()
    xt = g.leaf(img)
    params = m.bind(g, requires_grad=True)
    logits, _ = m.forward(xt, params)
    g.backward(ad.sigmoid_bce(logits, t))
    coords = rng.choice(img.size, size=40, replace=False)
    fd = oracles.central_diff(loss_of, img, coords=coords)
    for i in coords:
        a, b = xt.grad.ravel()[i], fd[i]
        assert abs(a - b) <= 1e-5 * max(abs(a), abs(b), 1e-6), (i, a, b)
    # a handful of parameter coordinates
    w = m.params["conv1.w"]
    pc = rng.choice(w.size, size=10, replace=False)

    def loss_w(wv):
        m2 = m.copy()
        m2.params["conv1.w"] = wv
        return _loss(m2, img, t)

    fdw = oracles.central_diff(loss_w, w, coords=pc)
    for i in pc:
        a, b = params["conv1.w"].grad.ravel()[i], fdw[i]
        assert abs(a - b) <= 1e-5 * max(abs(a), abs(b), 1e-6), (i, a, b)


def _loss(m, x, t):
    g = ad.Graph()
    logits, _ = m.forward(g.constant(x))
    return float(ad.sigmoid_bce(logits, t).data)


@pytest.mark.parametrize("seed", range(10))
def test_model_bce_gradient_matches_finite_differences(seed):
    _fd_check_model(seed)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_bce_never_nan(zs):
    g, z = leaf(np.array(zs))
    t = np.ones(len(zs))
    assert np.isfinite(ad.sigmoid_bce(z, t).data)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 12), st.integers(1, 12))
def test_bilinear_rows_sum_to_one(n_in, n_in2, h, w):
    m = ad.bilinear_matrix(n_in, h)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-15)
    np.testing.assert_allclose(ad.resize_array(np.ones((n_in, n_in2)), h, w), 1.0, atol=1e-14)
