import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featfilter.checks import numerical_grad, rel_error
from featfilter.tensor import (
    ConvKernel,
    ShapeError,
    conv2d,
    conv2d_backward,
    elementwise,
    from_fsm1,
    load_fsm1,
    maxpool2,
    maxpool2_backward,
    relu,
    save_fsm1,
    sigmoid,
    to_fsm1,
    upsample2,
    upsample2_backward,
)


def loop_conv(x, w, b, padding):
    """Direct nested-loop correlation."""
    kh, kw, cin, cout = w.shape
    if padding == "same":
        x = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    h, wd = x.shape[0] - kh + 1, x.shape[1] - kw + 1
    out = np.zeros((h, wd, cout))
    for i in range(h):
        for j in range(wd):
            for o in range(cout):
                out[i, j, o] = np.sum(x[i:i + kh, j:j + kw, :] * w[..., o]) + b[o]
    return out


def test_conv_identity_kernel():
    k = ConvKernel(np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(conv2d(np.full((1, 1, 1), 5.0), k), [[[5.0]]])


def test_conv_valid_window_sum():
    k = ConvKernel(np.ones((3, 3, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(conv2d(np.ones((3, 3, 1)), k, padding="valid"), [[[9.0]]])


def test_conv_zero_kernel_gives_bias(rng):
    k = ConvKernel(np.zeros((3, 3, 2, 3)), np.array([1.5, -2.0, 0.25]))
    out = conv2d(rng.normal(size=(5, 6, 2)), k)
    np.testing.assert_array_equal(out, np.broadcast_to([1.5, -2.0, 0.25], (5, 6, 3)))


@pytest.mark.parametrize("padding", ["same", "valid"])
@pytest.mark.parametrize("ksize", [1, 3, 5])
def test_conv_matches_loop(rng, padding, ksize):
    x = rng.normal(size=(7, 6, 3))
    w = rng.normal(size=(ksize, ksize, 3, 4))
    b = rng.normal(size=4)
    np.testing.assert_allclose(conv2d(x, ConvKernel(w, b), padding), loop_conv(x, w, b, padding),
                               rtol=1e-12, atol=1e-12)


def test_conv_rejects_bad_shapes():
    with pytest.raises(ValueError):
        ConvKernel(np.zeros((2, 2, 1, 1)), np.zeros(1))
    with pytest.raises(ValueError):
        ConvKernel(np.zeros((3, 3, 1, 2)), np.zeros(3))
    with pytest.raises(ShapeError):
        conv2d(np.zeros((4, 4, 2)), ConvKernel.zeros(3, 3, 1, 1))


def test_conv_backward_zero_grad(rng):
    x = rng.normal(size=(4, 4, 2))
    k = ConvKernel(rng.normal(size=(3, 3, 2, 2)), rng.normal(size=2))
    gx, gk = conv2d_backward(np.zeros((4, 4, 2)), x, k)
    assert not gx.any() and not gk.weights.any() and not gk.biases.any()


def test_conv_backward_scalar():
    x = np.array([[[3.0]]])
    k = ConvKernel(np.array([[[[2.0]]]]), np.array([0.5]))
    gx, gk = conv2d_backward(np.array([[[7.0]]]), x, k)
    assert gk.weights[0, 0, 0, 0] == 21.0
    assert gk.biases[0] == 7.0
    assert gx[0, 0, 0] == 14.0


@pytest.mark.parametrize("padding", ["same", "valid"])
def test_conv_backward_finite_differences(rng, padding):
    x = rng.normal(size=(5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    g = rng.normal(size=conv2d(x, ConvKernel(w, b), padding).shape)
    gx, gk = conv2d_backward(g, x, ConvKernel(w, b), padding)
    def loss():
        return np.sum(g * conv2d(x, ConvKernel(w, b), padding))

    assert rel_error(gx, numerical_grad(loss, x)) < 1e-4
    assert rel_error(gk.weights, numerical_grad(loss, w)) < 1e-4
    assert rel_error(gk.biases, numerical_grad(loss, b)) < 1e-4


def test_maxpool_cases(rng):
    pooled, _ = maxpool2(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None])
    np.testing.assert_array_equal(pooled, [[[4.0]]])
    pooled, _ = maxpool2(np.full((4, 6, 2), 3.0))
    np.testing.assert_array_equal(pooled, np.full((2, 3, 2), 3.0))
    x = rng.normal(size=(4, 4, 3))
    want = np.array([[[x[2 * i:2 * i + 2, 2 * j:2 * j + 2, c].max() for c in range(3)]
                      for j in range(2)] for i in range(2)])
    np.testing.assert_array_equal(maxpool2(x)[0], want)


def test_maxpool_odd_dims_rejected():
    with pytest.raises(ShapeError):
        maxpool2(np.zeros((3, 4, 1)))


def test_maxpool_backward_routes_to_argmax(rng):
    x = rng.normal(size=(4, 4, 2))
    pooled, idx = maxpool2(x)
    g = rng.normal(size=pooled.shape)
    gx = maxpool2_backward(g, idx)
    assert rel_error(gx, numerical_grad(lambda: np.sum(g * maxpool2(x)[0]), x)) < 1e-6
    assert np.count_nonzero(gx) == g.size


def test_upsample_cases(rng):
    np.testing.assert_array_equal(upsample2(np.full((1, 1, 1), 7.0)), np.full((2, 2, 1), 7.0))
    c = np.full((4, 4, 2), -1.5)
    np.testing.assert_array_equal(upsample2(maxpool2(c)[0]), c)
    x = rng.normal(size=(3, 5, 2))
    assert np.isclose(upsample2(x).sum(), 4 * x.sum())
    g = rng.normal(size=(6, 10, 2))
    np.testing.assert_allclose(upsample2_backward(g), numerical_grad(lambda: np.sum(g * upsample2(x)), x),
                               atol=1e-8)


def test_pointwise():
    assert sigmoid(np.array(0.0)) == 0.5
    np.testing.assert_array_equal(relu(np.array([-3.0, 3.0])), [0.0, 3.0])
    f = np.arange(6.0).reshape(1, 2, 3)
    np.testing.assert_array_equal(elementwise("mul", f, np.ones_like(f)), f)
    with pytest.raises(ShapeError):
        elementwise("add", f, np.ones((2, 1, 3)))


def test_sigmoid_stays_open_interval():
    s = sigmoid(np.array([-1000.0, -40.0, 40.0, 1000.0]))
    assert np.all(s > 0) and np.all(s < 1)
    assert np.all(np.isfinite(s))


def test_fsm1_layout():
    buf = to_fsm1(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"FSM1"
    assert buf[4:16] == bytes([2, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0])
    assert buf[16:24] == np.float64(1.0).tobytes()
    assert len(buf) == 16 + 3 * 8


def test_fsm1_roundtrip(tmp_path, rng):
    arr = rng.normal(size=(3, 3, 2, 4))
    save_fsm1(tmp_path / "w.fsm", arr)
    back = load_fsm1(tmp_path / "w.fsm")
    np.testing.assert_array_equal(back, arr)
    with pytest.raises(ValueError):
        from_fsm1(b"NOPE" + to_fsm1(arr)[4:])
    with pytest.raises(ValueError):
        from_fsm1(to_fsm1(arr)[:-1])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_conv_is_linear(cin, cout, alpha, seed):
    r = np.random.default_rng(seed)
    x, e = r.normal(size=(2, 6, 5, cin))
    k = ConvKernel(r.normal(size=(3, 3, cin, cout)), np.zeros(cout))
    lhs = conv2d(alpha * x + (1 - alpha) * e, k)
    rhs = alpha * conv2d(x, k) + (1 - alpha) * conv2d(e, k)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
