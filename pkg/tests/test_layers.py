import math

import numpy as np
import pytest

from featfilter.checks import numerical_grad, rel_error
from featfilter.layers import (
    BatchNorm,
    Block,
    BlockSpec,
    Cff,
    Conv,
    bc_forward,
    cff_backward,
    cff_forward,
    fbc_forward,
    softmax_ce_loss,
)
from featfilter.tensor import ConvKernel, ShapeError, conv2d, relu


def make_conv(rng, cin, cout, k=3):
    return Conv(rng.normal(size=(k, k, cin, cout)) * 0.5, rng.normal(size=cout) * 0.1)


def make_gate(rng, ch, k=1):
    return ConvKernel(rng.normal(size=(k, k, ch, ch)), rng.normal(size=ch))


def test_bc_zero_weights_gives_zeros():
    out = bc_forward(np.ones((4, 4, 2)), Conv(np.zeros((3, 3, 2, 3)), np.zeros(3)), BatchNorm(3))
    np.testing.assert_array_equal(out, 0.0)
    out = bc_forward(np.ones((4, 4, 2)), Conv(np.zeros((3, 3, 2, 3)), np.zeros(3)), BatchNorm(3), mode="train")
    np.testing.assert_array_equal(out, 0.0)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_bc_gamma_zero_gives_beta(rng, mode):
    bn = BatchNorm(3)
    bn.params["gamma"][:] = 0.0
    bn.params["beta"][:] = [0.5, -1.0, 2.0]
    out = bc_forward(rng.normal(size=(5, 5, 2)), make_conv(rng, 2, 3), bn, mode=mode)
    np.testing.assert_array_equal(out, np.broadcast_to([0.5, -1.0, 2.0], out.shape))


def test_bc_matches_composition(rng):
    x = rng.normal(size=(6, 6, 2))
    conv = make_conv(rng, 2, 4)
    bn = BatchNorm(4)
    bn.params["gamma"][:] = rng.uniform(0.5, 2, 4)
    bn.params["beta"][:] = rng.normal(size=4)
    z = relu(conv2d(x, conv.kernel))
    mean, var = z.mean(axis=(0, 1)), z.var(axis=(0, 1))
    want = bn.params["gamma"] * (z - mean) / np.sqrt(var + 1e-5) + bn.params["beta"]
    np.testing.assert_allclose(bc_forward(x, conv, bn, mode="train"), want, rtol=1e-12, atol=1e-12)
    # conventional order normalizes before the nonlinearity
    bn2 = BatchNorm(4)
    y = conv2d(x, conv.kernel)
    want2 = relu((y - y.mean(axis=(0, 1))) / np.sqrt(y.var(axis=(0, 1)) + 1e-5))
    np.testing.assert_allclose(bc_forward(x, conv, bn2, mode="train", block_order="conventional"), want2,
                               rtol=1e-12, atol=1e-12)


def test_batchnorm_running_stats(rng):
    bn = BatchNorm(2)
    x = rng.normal(3.0, 2.0, size=(4, 4, 2))
    bn.forward(x, train=True)
    np.testing.assert_allclose(bn.state["running_mean"], 0.1 * x.mean(axis=(0, 1)))
    np.testing.assert_allclose(bn.state["running_var"], 0.9 + 0.1 * x.var(axis=(0, 1)))
    # eval mode uses running statistics and leaves them alone
    before = {k: v.copy() for k, v in bn.state.items()}
    out = bn.forward(x, train=False)
    want = (x - before["running_mean"]) / np.sqrt(before["running_var"] + 1e-5)
    np.testing.assert_allclose(out, want)
    np.testing.assert_array_equal(bn.state["running_mean"], before["running_mean"])


def test_batchnorm_channel_mismatch():
    with pytest.raises(ShapeError):
        BatchNorm(3).forward(np.zeros((2, 2, 2)))


def test_cff_zero_gate_halves():
    f = np.random.default_rng(0).normal(size=(4, 4, 3))
    d = cff_forward(f, ConvKernel.zeros(1, 1, 3, 3))
    np.testing.assert_array_equal(d, 0.5 * f)


def test_cff_saturated_gate_passes(rng):
    f = rng.normal(size=(4, 4, 3))
    d = cff_forward(f, ConvKernel(np.zeros((1, 1, 3, 3)), np.full(3, 20.0)))
    assert np.abs(d - f).max() < 1e-8 * np.abs(f).max()


def test_cff_matches_per_pixel_oracle(rng):
    f = rng.normal(size=(4, 4, 3))
    gate = make_gate(rng, 3)
    want = np.empty_like(f)
    for i in range(4):
        for j in range(4):
            v = f[i, j]
            pre = gate.weights[0, 0].T @ v + gate.biases
            want[i, j] = v / (1.0 + np.exp(-pre))
    np.testing.assert_allclose(cff_forward(f, gate), want, rtol=1e-13, atol=1e-15)


def test_cff_shape_checks(rng):
    with pytest.raises(ShapeError):
        cff_forward(rng.normal(size=(4, 4, 2)), make_gate(rng, 3))
    with pytest.raises(ShapeError):
        Cff(np.zeros((1, 1, 2, 3)), np.zeros(3))


def test_cff_backward_cases(rng):
    f = rng.normal(size=(4, 4, 3))
    gate = make_gate(rng, 3)
    gf, gk = cff_backward(np.zeros_like(f), f, gate)
    assert not gf.any() and not gk.weights.any() and not gk.biases.any()
    g = rng.normal(size=f.shape)
    gf, _ = cff_backward(g, f, ConvKernel(np.zeros((1, 1, 3, 3)), np.full(3, 20.0)))
    np.testing.assert_allclose(gf, g, atol=1e-7)


@pytest.mark.parametrize("k", [1, 3])
def test_cff_backward_finite_differences(rng, k):
    f = rng.normal(size=(4, 4, 3))
    gate = make_gate(rng, 3, k)
    g = rng.normal(size=f.shape)
    gf, gk = cff_backward(g, f, gate)

    def loss():
        return np.sum(g * cff_forward(f, gate))

    assert rel_error(gf, numerical_grad(loss, f)) < 1e-4
    assert rel_error(gk.weights, numerical_grad(loss, gate.weights)) < 1e-4
    assert rel_error(gk.biases, numerical_grad(loss, gate.biases)) < 1e-4


def test_fbc_limits_and_composition(rng):
    x = rng.normal(size=(4, 4, 2))
    conv = make_conv(rng, 2, 3)
    f_sat, d_sat = fbc_forward(x, conv, BatchNorm(3), ConvKernel(np.zeros((1, 1, 3, 3)), np.full(3, 20.0)))
    np.testing.assert_allclose(d_sat, bc_forward(x, conv, BatchNorm(3)), atol=1e-8)
    f0, d0 = fbc_forward(x, conv, BatchNorm(3), ConvKernel.zeros(1, 1, 3, 3))
    np.testing.assert_array_equal(d0, 0.5 * f0)
    gate = make_gate(rng, 3)
    f, d = fbc_forward(x, conv, BatchNorm(3), gate, mode="train")
    np.testing.assert_array_equal(f, bc_forward(x, conv, BatchNorm(3), mode="train"))
    np.testing.assert_allclose(d, cff_forward(f, gate), rtol=1e-14)


@pytest.mark.parametrize("order", ["paper", "conventional"])
@pytest.mark.parametrize("train", [True, False])
def test_block_backward_finite_differences(rng, order, train):
    x = rng.normal(size=(4, 4, 2))
    block = Block(make_conv(rng, 2, 3), BatchNorm(3), Cff(*_gate_arrays(rng, 3)), order)
    block.bn.params["gamma"][:] = rng.uniform(0.5, 1.5, 3)
    block.bn.state["running_var"][:] = rng.uniform(0.5, 2.0, 3)
    g = rng.normal(size=(4, 4, 3))
    state = {k: v.copy() for k, v in block.bn.state.items()}

    def loss():
        block.bn.state = {k: v.copy() for k, v in state.items()}
        return np.sum(g * block.forward(x, train))

    loss()
    gx = block.backward(g)
    analytic = {"x": gx, "w": block.conv.grads["w"], "gamma": block.bn.grads["gamma"],
                "gate": block.cff.grads["w"]}
    assert rel_error(analytic["x"], numerical_grad(loss, x)) < 1e-4
    assert rel_error(analytic["w"], numerical_grad(loss, block.conv.params["w"])) < 1e-4
    assert rel_error(analytic["gamma"], numerical_grad(loss, block.bn.params["gamma"])) < 1e-4
    assert rel_error(analytic["gate"], numerical_grad(loss, block.cff.params["w"])) < 1e-4


def _gate_arrays(rng, ch):
    return rng.normal(size=(1, 1, ch, ch)), rng.normal(size=ch)


def test_softmax_ce_cases(rng):
    loss, _ = softmax_ce_loss(np.zeros((2, 3, 4)), np.zeros((2, 3), int))
    assert math.isclose(loss, math.log(4), rel_tol=1e-15)
    logits = np.zeros((1, 2, 3))
    logits[..., 1] = 1000.0
    loss, _ = softmax_ce_loss(logits, np.ones((1, 2), int))
    assert loss < 1e-12
    logits = rng.normal(size=(2, 2, 3))
    labels = rng.integers(0, 3, size=(2, 2))
    _, grad = softmax_ce_loss(logits, labels)
    assert rel_error(grad, numerical_grad(lambda: softmax_ce_loss(logits, labels)[0], logits)) < 1e-4


def test_softmax_ce_rejects_bad_labels():
    with pytest.raises(ValueError):
        softmax_ce_loss(np.zeros((2, 2, 3)), np.full((2, 2), 3))
    with pytest.raises(ShapeError):
        softmax_ce_loss(np.zeros((2, 2, 3)), np.zeros((2, 3), int))


def test_block_spec_validation():
    BlockSpec("fbc", 3, 8, 3)
    for bad in [dict(kind="x"), dict(conv_kernel_size=2), dict(cff_kernel_size=5), dict(out_channels=0)]:
        with pytest.raises(ValueError):
            BlockSpec(**bad)
