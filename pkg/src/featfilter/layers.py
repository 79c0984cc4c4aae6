"""Network building blocks with explicit forward/backward rules.

``bc``  : f = BN(relu(conv(x)))  (``block_order="paper"``)
          f = relu(BN(conv(x)))  (``block_order="conventional"``)
``cff`` : d = sigmoid(conv_gate(f)) * f
``fbc`` : cff(bc(x))

Modules keep their trainable arrays in ``self.params`` and fill ``self.grads``
with matching keys on ``backward``. BN running statistics live in
``self.state`` and are not trainable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DTYPE,
    ConvKernel,
    ShapeError,
    channel_sum,
    conv2d,
    conv2d_backward,
    relu,
    sigmoid,
)

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9
BLOCK_ORDERS = ("paper", "conventional")


@dataclass
class BlockSpec:
    kind: str = "bc"
    conv_kernel_size: int = 3
    out_channels: int = 8
    cff_kernel_size: int = 1

    def __post_init__(self):
        if self.kind not in ("bc", "fbc"):
            raise ValueError(f"block kind must be 'bc' or 'fbc', got {self.kind!r}")
        if self.conv_kernel_size < 1 or self.conv_kernel_size % 2 == 0:
            raise ValueError("conv_kernel_size must be an odd positive integer")
        if self.cff_kernel_size not in (1, 3):
            raise ValueError("cff_kernel_size must be 1 or 3")
        if self.out_channels < 1:
            raise ValueError("out_channels must be positive")


class Conv:
    """Stride-1 'same' convolution with bias."""

    def __init__(self, weights, biases):
        self.params = {"w": np.asarray(weights, dtype=DTYPE), "b": np.asarray(biases, dtype=DTYPE)}
        ConvKernel(self.params["w"], self.params["b"])  # validates shapes
        self.grads = {}
        self._x = None

    @property
    def kernel(self):
        return ConvKernel(self.params["w"], self.params["b"])

    def forward(self, x):
        self._x = x
        return conv2d(x, self.kernel, "same")

    def backward(self, grad):
        gx, gk = conv2d_backward(grad, self._x, self.kernel, "same")
        self.grads = {"w": gk.weights, "b": gk.biases}
        return gx


class BatchNorm:
    """Per-channel normalisation over the spatial extent of one sample.

    With batch size 1 the train-mode statistics are the spatial mean and
    population variance of each channel. ``momentum`` is the weight kept on
    the old running value.
    """

    def __init__(self, channels, epsilon=BN_EPSILON, momentum=BN_MOMENTUM):
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.epsilon = epsilon
        self.momentum = momentum
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.state = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}
        self.grads = {}
        self._cache = None

    def forward(self, x, train=False):
        c = self.params["gamma"].shape[0]
        if x.ndim != 3 or x.shape[2] != c:
            raise ShapeError(f"channel mismatch: input {x.shape}, batchnorm has {c} channels")
        if train:
            n = x.shape[0] * x.shape[1]
            mean = channel_sum(x) / n
            var = channel_sum((x - mean) ** 2) / n
            m = self.momentum
            self.state["running_mean"] = m * self.state["running_mean"] + (1 - m) * mean
            self.state["running_var"] = m * self.state["running_var"] + (1 - m) * var
        else:
            mean, var = self.state["running_mean"], self.state["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, train)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, grad):
        xhat, inv_std, train = self._cache
        gamma = self.params["gamma"]
        gsum = channel_sum(grad)
        gxsum = channel_sum(grad * xhat)
        self.grads = {"gamma": gxsum, "beta": gsum}
        if not train:
            return grad * gamma * inv_std
        n = grad.shape[0] * grad.shape[1]
        gmean, gxmean = gsum / n, gxsum / n
        return gamma * inv_std * (grad - gmean - xhat * gxmean)


class Cff:
    """Convolutional feature filter: ``d = sigmoid(conv(f)) * f``."""

    def __init__(self, weights, biases):
        self.gate = Conv(weights, biases)
        kh, kw, cin, cout = self.gate.params["w"].shape
        if cin != cout:
            raise ShapeError(f"gate kernel must be square in channels, got {cin}->{cout}")
        self.params = self.gate.params
        self.grads = {}
        self._cache = None

    def forward(self, f):
        g = sigmoid(self.gate.forward(f))
        self._cache = (f, g)
        return g * f

    def backward(self, grad_d):
        f, g = self._cache
        grad_pre = grad_d * f * g * (1.0 - g)
        grad_f = grad_d * g + self.gate.backward(grad_pre)
        self.grads = self.gate.grads
        return grad_f


class Block:
    """A ``bc`` block, or an ``fbc`` block when ``cff`` is given.

    After ``forward`` the pre-filter map is available as ``self.f`` and the
    block output as ``self.d`` (``d is f`` for plain bc blocks).
    """

    def __init__(self, conv: Conv, bn: BatchNorm, cff: Cff | None = None, block_order="paper"):
        if block_order not in BLOCK_ORDERS:
            raise ValueError(f"block_order must be one of {BLOCK_ORDERS}")
        self.conv, self.bn, self.cff = conv, bn, cff
        self.block_order = block_order
        self.f = self.d = None
        self._relu_mask = None

    @property
    def kind(self):
        return "bc" if self.cff is None else "fbc"

    def submodules(self):
        mods = {"conv": self.conv, "bn": self.bn}
        if self.cff is not None:
            mods["cff"] = self.cff
        return mods

    def forward(self, x, train=False):
        z = self.conv.forward(x)
        if self.block_order == "paper":
            self._relu_mask = z > 0
            f = self.bn.forward(relu(z), train)
        else:
            y = self.bn.forward(z, train)
            self._relu_mask = y > 0
            f = relu(y)
        self.f = f
        self.d = self.cff.forward(f) if self.cff is not None else f
        return self.d

    def backward(self, grad):
        if self.cff is not None:
            grad = self.cff.backward(grad)
        if self.block_order == "paper":
            grad = self.bn.backward(grad) * self._relu_mask
        else:
            grad = self.bn.backward(grad * self._relu_mask)
        return self.conv.backward(grad)


# -- functional forms -------------------------------------------------------

def bc_forward(x, conv: Conv, bn: BatchNorm, mode="eval", block_order="paper"):
    return Block(conv, bn, None, block_order).forward(x, train=(mode == "train"))


def cff_forward(f, gate: ConvKernel):
    """Filtered feature matrix for gate kernel ``gate`` (in_ch == out_ch == f's channels)."""
    f = np.asarray(f, dtype=DTYPE)
    if f.ndim != 3 or gate.shape[2] != f.shape[2]:
        raise ShapeError(f"channel mismatch: f {f.shape}, gate expects {gate.shape[2]} channels")
    return Cff(gate.weights, gate.biases).forward(f)


def cff_backward(grad_d, f, gate: ConvKernel):
    """Returns ``(grad_f, grad_gate)`` for ``d = cff(f)``."""
    grad_d = np.asarray(grad_d, dtype=DTYPE)
    f = np.asarray(f, dtype=DTYPE)
    if grad_d.shape != f.shape:
        raise ShapeError(f"grad_d shape {grad_d.shape} != f shape {f.shape}")
    cff = Cff(gate.weights, gate.biases)
    cff.forward(f)
    grad_f = cff.backward(grad_d)
    return grad_f, ConvKernel(cff.grads["w"], cff.grads["b"])


def fbc_forward(x, conv: Conv, bn: BatchNorm, gate: ConvKernel, mode="eval", block_order="paper"):
    """Returns ``(f, d)``: the bc output and its filtered version."""
    block = Block(conv, bn, Cff(gate.weights, gate.biases), block_order)
    block.forward(x, train=(mode == "train"))
    return block.f, block.d


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce_loss(logits, labels):
    """Mean pixel-wise cross-entropy and its gradient w.r.t. ``logits``.

    ``logits`` is ``(H, W, K)``, ``labels`` an integer ``(H, W)`` map.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels)
    if logits.ndim != 3 or labels.shape != logits.shape[:2]:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[2]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label values must lie in 0..{k - 1}")
    z = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, labels[..., None].astype(np.intp), axis=-1)[..., 0]
    n = labels.size
    loss = float((logz - picked).sum() / n)
    grad = np.exp(z - logz[..., None])
    np.put_along_axis(grad, labels[..., None].astype(np.intp),
                      np.take_along_axis(grad, labels[..., None].astype(np.intp), axis=-1) - 1.0, axis=-1)
    return loss, grad / n
