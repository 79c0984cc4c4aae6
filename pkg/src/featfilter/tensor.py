"""Dense float64 tensor primitives: convolution, pooling, upsampling, pointwise ops.

Feature matrices are numpy arrays laid out ``(H, W, ch)`` (channel innermost,
row-major). Every function here is pure; nothing mutates its inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

DTYPE = np.float64

# Largest double strictly below 1; keeps sigmoid inside the open interval.
_GATE_MAX = 1.0 - 2.0**-53
_GATE_MIN = 2.0**-53


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


@dataclass
class ConvKernel:
    """Convolution weights ``(kh, kw, in_ch, out_ch)`` and biases ``(out_ch,)``."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=DTYPE)
        self.biases = np.asarray(self.biases, dtype=DTYPE)
        if self.weights.ndim != 4:
            raise ShapeError(f"kernel weights must be rank 4, got {self.weights.shape}")
        kh, kw, cin, cout = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
        if cin < 1 or cout < 1:
            raise ShapeError("kernel needs at least one input and one output channel")
        if self.biases.shape != (cout,):
            raise ShapeError(f"bias shape {self.biases.shape} != ({cout},)")

    @property
    def shape(self):
        return self.weights.shape

    @classmethod
    def zeros(cls, kh, kw, in_ch, out_ch):
        return cls(np.zeros((kh, kw, in_ch, out_ch)), np.zeros(out_ch))


def _check_rank3(x, what="input"):
    if x.ndim != 3:
        raise ShapeError(f"{what} must be rank 3 (H, W, ch), got shape {x.shape}")


def channel_sum(x):
    """Per-channel sum over all spatial positions (BLAS dot, much faster
    than a strided numpy reduction for few channels)."""
    c = x.shape[-1]
    flat = x.reshape(-1, c)
    return np.ones(flat.shape[0], dtype=DTYPE) @ flat


def _pad_amount(kh, kw, padding):
    if padding == "same":
        return kh // 2, kw // 2
    if padding == "valid":
        return 0, 0
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _padded_flat(x, ph, pw):
    """Zero-pad ``x`` spatially and return it flattened to ``(rows, ch)``.

    One spare zero row is appended so every shifted window in
    :func:`_correlate_flat` stays in bounds.
    """
    h, w, c = x.shape
    wp = w + 2 * pw
    xp = np.zeros((h + 2 * ph + 1, wp, c), dtype=DTYPE)
    xp[ph:ph + h, pw:pw + w] = x
    return xp.reshape(-1, c), h + 2 * ph, wp


def _correlate_flat(xf, hp, wp, weights):
    """Valid cross-correlation of a flat padded image with ``weights``.

    Output row ``p`` of the flat result is the window anchored at flat offset
    ``p``; each kernel tap is then a contiguous slice, so the whole
    correlation is kh*kw plain matmuls. Columns past ``wo`` wrap around the
    row edge and are discarded.
    """
    kh, kw, _, cout = weights.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    n = ho * wp
    out = np.zeros((n, cout), dtype=DTYPE)
    for u in range(kh):
        for v in range(kw):
            o = u * wp + v
            out += xf[o:o + n] @ weights[u, v]
    return out.reshape(ho, wp, cout)[:, :wo]


def conv2d(x, kernel: ConvKernel, padding="same"):
    """Cross-correlation of ``x`` with ``kernel`` plus bias, stride 1."""
    x = np.asarray(x, dtype=DTYPE)
    _check_rank3(x)
    kh, kw, cin, cout = kernel.shape
    if x.shape[2] != cin:
        raise ShapeError(f"channel mismatch: input has {x.shape[2]}, kernel expects {cin}")
    ph, pw = _pad_amount(kh, kw, padding)
    if x.shape[0] + 2 * ph < kh or x.shape[1] + 2 * pw < kw:
        raise ShapeError(f"input {x.shape[:2]} smaller than kernel {kh}x{kw}")
    if kh == 1 and kw == 1:
        return x @ kernel.weights[0, 0] + kernel.biases
    xf, hp, wp = _padded_flat(x, ph, pw)
    return _correlate_flat(xf, hp, wp, kernel.weights) + kernel.biases


def conv2d_backward(grad_out, cached_input, kernel: ConvKernel, padding="same"):
    """Gradients of a conv2d call.

    Returns ``(grad_input, grad_kernel)`` where ``grad_kernel`` is a
    :class:`ConvKernel` holding the weight and bias gradients.
    """
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    x = np.asarray(cached_input, dtype=DTYPE)
    _check_rank3(x, "cached input")
    kh, kw, cin, cout = kernel.shape
    if x.shape[2] != cin:
        raise ShapeError(f"channel mismatch: input has {x.shape[2]}, kernel expects {cin}")
    ph, pw = _pad_amount(kh, kw, padding)
    ho, wo = x.shape[0] + 2 * ph - kh + 1, x.shape[1] + 2 * pw - kw + 1
    if grad_out.shape != (ho, wo, cout):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(ho, wo, cout)}")
    grad_b = channel_sum(grad_out)
    if kh == 1 and kw == 1:
        g2 = grad_out.reshape(-1, cout)
        grad_w = (x.reshape(-1, cin).T @ g2).reshape(kernel.weights.shape)
        grad_x = grad_out @ kernel.weights[0, 0].T
        return grad_x, ConvKernel(grad_w, grad_b)
    xf, hp, wp = _padded_flat(x, ph, pw)
    # grad_out laid out on the padded row pitch, zero in the wrap-around columns
    gpitch = np.zeros((ho, wp, cout), dtype=DTYPE)
    gpitch[:, :wo] = grad_out
    gpitch = gpitch.reshape(-1, cout)
    n = gpitch.shape[0]
    grad_w = np.empty(kernel.weights.shape, dtype=DTYPE)
    for u in range(kh):
        for v in range(kw):
            o = u * wp + v
            grad_w[u, v] = xf[o:o + n].T @ gpitch
    # input gradient: full correlation with the flipped, channel-transposed kernel
    wflip = np.ascontiguousarray(kernel.weights[::-1, ::-1].transpose(0, 1, 3, 2))
    gf, ghp, gwp = _padded_flat(grad_out, kh - 1 - ph, kw - 1 - pw)
    grad_x = _correlate_flat(gf, ghp, gwp, wflip)
    return grad_x, ConvKernel(grad_w, grad_b)


def maxpool2(x):
    """2x2 max pooling. Returns ``(pooled, argmax)``; argmax indexes the
    flattened 2x2 window (row-major) and is consumed by :func:`maxpool2_backward`.
    """
    x = np.asarray(x, dtype=DTYPE)
    _check_rank3(x)
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    win = x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3).reshape(h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx


def maxpool2_backward(grad_out, argmax):
    ho, wo, c = grad_out.shape
    if argmax.shape != grad_out.shape:
        raise ShapeError("argmax and grad_out shapes differ")
    win = np.zeros((ho, wo, c, 4), dtype=DTYPE)
    np.put_along_axis(win, argmax[..., None], grad_out[..., None], axis=-1)
    return win.reshape(ho, wo, c, 2, 2).transpose(0, 3, 1, 4, 2).reshape(2 * ho, 2 * wo, c)


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    x = np.asarray(x, dtype=DTYPE)
    _check_rank3(x)
    return x.repeat(2, axis=0).repeat(2, axis=1)


def upsample2_backward(grad_out):
    h, w, c = grad_out.shape
    if h % 2 or w % 2:
        raise ShapeError(f"upsample2 gradient must have even extents, got {h}x{w}")
    return grad_out.reshape(h // 2, 2, w // 2, 2, c).sum(axis=(1, 3))


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    """Logistic function, clipped one ulp inside (0, 1) so the gate never
    reaches 0 or 1 exactly for finite input."""
    out = np.asarray(expit(np.asarray(x, dtype=DTYPE)))
    if out.ndim == 0:
        return np.clip(out, _GATE_MIN, _GATE_MAX)
    return np.clip(out, _GATE_MIN, _GATE_MAX, out=out)


def elementwise(op, a, b=None):
    """Apply ``relu``/``sigmoid`` (unary) or ``mul``/``add`` (binary, equal dims)."""
    a = np.asarray(a, dtype=DTYPE)
    if op == "relu":
        return relu(a)
    if op == "sigmoid":
        return sigmoid(a)
    if op in ("mul", "add"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        b = np.asarray(b, dtype=DTYPE)
        if a.shape != b.shape:
            raise ShapeError(f"dims mismatch: {a.shape} vs {b.shape}")
        return a * b if op == "mul" else a + b
    raise ValueError(f"unknown elementwise op {op!r}")


# -- FSM1 binary dump -------------------------------------------------------

FSM1_MAGIC = b"FSM1"


def to_fsm1(arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    if not 1 <= arr.ndim <= 4:
        raise ShapeError(f"FSM1 supports rank 1-4, got {arr.ndim}")
    head = FSM1_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def from_fsm1(buf: bytes) -> np.ndarray:
    if buf[:4] != FSM1_MAGIC:
        raise ValueError("not an FSM1 buffer (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if not 1 <= rank <= 4:
        raise ValueError(f"FSM1 rank {rank} out of range")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    n = int(np.prod(dims))
    if len(buf) != off + 8 * n:
        raise ValueError(f"FSM1 payload length {len(buf) - off} != {8 * n}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(DTYPE).reshape(dims)


def save_fsm1(path, arr):
    Path(path).write_bytes(to_fsm1(arr))


def load_fsm1(path) -> np.ndarray:
    return from_fsm1(Path(path).read_bytes())
