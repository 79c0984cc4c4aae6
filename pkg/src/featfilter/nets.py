"""Mini FCN / U-net segmentation graphs, with or without feature filters.

A :class:`LayerGraph` is a topologically ordered node list; each node names
its input nodes by index. Alt networks use plain ``bc`` blocks; Neu networks
replace every one of them by an ``fbc`` block. Parameters are initialised
from a per-name random stream, so adding filters never changes the initial
values of the shared backbone.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import BatchNorm, Block, Cff, Conv
from .tensor import (
    ShapeError,
    maxpool2,
    maxpool2_backward,
    upsample2,
    upsample2_backward,
)

FAMILIES = ("fcn", "unet")


@dataclass
class NetworkSpec:
    family: str = "unet"
    depth: int = 3
    base_channels: int = 8
    with_cff: bool = False
    cff_kernel_size: int = 1
    block_order: str = "paper"
    num_classes: int = 4
    conv_kernel_size: int = 3
    in_channels: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.depth < 1 or self.base_channels < 1 or self.num_classes < 2:
            raise ValueError("depth, base_channels must be >= 1 and num_classes >= 2")
        if self.cff_kernel_size not in (1, 3):
            raise ValueError("cff_kernel_size must be 1 or 3")
        if self.block_order not in ("paper", "conventional"):
            raise ValueError("block_order must be 'paper' or 'conventional'")
        if self.conv_kernel_size < 1 or self.conv_kernel_size % 2 == 0:
            raise ValueError("conv_kernel_size must be odd")

    def as_dict(self):
        return asdict(self)


class MaxPool:
    def forward(self, x):
        y, self._idx = maxpool2(x)
        return y

    def backward(self, g):
        return (maxpool2_backward(g, self._idx),)


class Upsample:
    def forward(self, x):
        return upsample2(x)

    def backward(self, g):
        return (upsample2_backward(g),)


class Concat:
    def forward(self, *xs):
        self._splits = np.cumsum([x.shape[2] for x in xs])[:-1]
        return np.concatenate(xs, axis=2)

    def backward(self, g):
        return tuple(np.split(g, self._splits, axis=2))


class Add:
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"cannot add {a.shape} and {b.shape}")
        return a + b

    def backward(self, g):
        return g, g


@dataclass
class Node:
    name: str
    kind: str  # input | bc | fbc | maxpool | upsample | concat | add | head
    inputs: list = field(default_factory=list)
    module: object = None


class LayerGraph:
    def __init__(self, spec: NetworkSpec, nodes):
        self.spec = spec
        self.nodes = nodes
        self._values = None

    # -- parameter access ---------------------------------------------------

    def leaf_modules(self):
        """``{prefix: module}`` for every module that owns parameters."""
        out = {}
        for node in self.nodes:
            if isinstance(node.module, Block):
                for sub, mod in node.module.submodules().items():
                    out[f"{node.name}.{sub}"] = mod
            elif isinstance(node.module, Conv):
                out[node.name] = node.module
        return out

    def params(self):
        return {f"{p}.{k}": v for p, m in self.leaf_modules().items() for k, v in m.params.items()}

    def grads(self):
        return {f"{p}.{k}": v for p, m in self.leaf_modules().items() for k, v in m.grads.items()}

    def buffers(self):
        return {f"{p}.{k}": v for p, m in self.leaf_modules().items()
                for k, v in getattr(m, "state", {}).items()}

    def state_dict(self):
        """Copies of all parameters and BN running statistics."""
        sd = {k: v.copy() for k, v in self.params().items()}
        sd.update({k: v.copy() for k, v in self.buffers().items()})
        return sd

    def load_state_dict(self, sd):
        params = self.params()
        expected = set(params) | set(self.buffers())
        if set(sd) != expected:
            missing = sorted(expected - set(sd))
            extra = sorted(set(sd) - expected)
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for key, arr in params.items():
            if arr.shape != sd[key].shape:
                raise ShapeError(f"{key}: shape {sd[key].shape} != {arr.shape}")
            arr[...] = sd[key]
        for prefix, mod in self.leaf_modules().items():
            for k in getattr(mod, "state", {}):
                mod.state[k] = np.array(sd[f"{prefix}.{k}"], dtype=float)

    def count_params(self):
        return int(sum(v.size for v in self.params().values()))

    def blocks(self):
        return [n.module for n in self.nodes if isinstance(n.module, Block)]

    def fbc_blocks(self):
        return [b for b in self.blocks() if b.cff is not None]

    def probe_taps(self):
        """``[(f, d), ...]`` per fbc block from the most recent forward."""
        return [(b.f, b.d) for b in self.fbc_blocks()]

    # -- execution ----------------------------------------------------------

    def check_input(self, x):
        h, w = x.shape[:2]
        step = 2 ** self.spec.depth
        if x.ndim != 3 or x.shape[2] != self.spec.in_channels:
            raise ShapeError(f"input must be (H, W, {self.spec.in_channels}), got {x.shape}")
        if h % step or w % step:
            raise ShapeError(f"input {h}x{w} not divisible by 2^depth = {step}")

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=float)
        self.check_input(x)
        vals = []
        for node in self.nodes:
            if node.kind == "input":
                vals.append(x)
                continue
            args = [vals[i] for i in node.inputs]
            if isinstance(node.module, Block):
                vals.append(node.module.forward(args[0], train))
            else:
                vals.append(node.module.forward(*args))
        self._values = vals
        return vals[-1]

    def backward(self, grad_logits):
        grads = [None] * len(self.nodes)
        grads[-1] = grad_logits
        for idx in range(len(self.nodes) - 1, 0, -1):
            node = self.nodes[idx]
            g = grads[idx]
            if g is None:
                continue
            out = node.module.backward(g)
            if not isinstance(out, tuple):
                out = (out,)
            for src, gi in zip(node.inputs, out):
                grads[src] = gi if grads[src] is None else grads[src] + gi
        return grads[0]

    def first_nonfinite(self):
        """Name of the first node whose last output is not finite, or None."""
        for node, v in zip(self.nodes, self._values or []):
            if not np.all(np.isfinite(v)):
                return node.name
        return None


# -- construction -------------------------------------------------------------

def _rng(seed, name):
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _he_conv(seed, name, k, cin, cout):
    fan_in = k * k * cin
    w = _rng(seed, name + ".w").normal(0.0, np.sqrt(2.0 / fan_in), size=(k, k, cin, cout))
    return Conv(w, np.zeros(cout))


def _gate(seed, name, k, ch):
    s = 1.0 / np.sqrt(k * k * ch)
    w = _rng(seed, name + ".w").uniform(-s, s, size=(k, k, ch, ch))
    return Cff(w, np.zeros(ch))


def _head(seed, name, cin, cout):
    w = _rng(seed, name + ".w").normal(0.0, np.sqrt(1.0 / cin), size=(1, 1, cin, cout))
    return Conv(w, np.zeros(cout))


class _Builder:
    def __init__(self, spec, seed):
        self.spec, self.seed = spec, seed
        self.nodes = [Node("input", "input")]

    def add(self, name, kind, inputs, module):
        self.nodes.append(Node(name, kind, list(inputs), module))
        return len(self.nodes) - 1

    def block(self, name, src, cin, cout):
        s = self.spec
        conv = _he_conv(self.seed, f"{name}.conv", s.conv_kernel_size, cin, cout)
        cff = _gate(self.seed, f"{name}.cff", s.cff_kernel_size, cout) if s.with_cff else None
        blk = Block(conv, BatchNorm(cout), cff, s.block_order)
        return self.add(name, blk.kind, [src], blk)

    def stage(self, prefix, src, cin, cout):
        a = self.block(prefix + "a", src, cin, cout)
        return self.block(prefix + "b", a, cout, cout)

    def encoder(self):
        s = self.spec
        src, cin, skips = 0, s.in_channels, []
        for level in range(s.depth):
            ch = s.base_channels * 2**level
            src = self.stage(f"enc{level}", src, cin, ch)
            skips.append((src, ch))
            src = self.add(f"pool{level}", "maxpool", [src], MaxPool())
            cin = ch
        ch = s.base_channels * 2**s.depth
        src = self.stage("mid", src, cin, ch)
        return src, ch, skips


def build(spec: NetworkSpec, seed=0) -> LayerGraph:
    """Build a seeded Alt (``with_cff=False``) or Neu (``with_cff=True``) graph.

    U-net: ``depth`` encoder stages, a bottleneck stage and mirrored decoder
    stages joined by skip concatenation, two blocks per stage. FCN: the same
    encoder and bottleneck, then 1x1 score heads fused coarse-to-fine by
    upsample-and-sum.
    """
    b = _Builder(spec, seed)
    src, ch, skips = b.encoder()
    k = spec.num_classes
    if spec.family == "unet":
        for level in reversed(range(spec.depth)):
            skip, sch = skips[level]
            up = b.add(f"up{level}", "upsample", [src], Upsample())
            cat = b.add(f"cat{level}", "concat", [skip, up], Concat())
            src = b.stage(f"dec{level}", cat, sch + ch, sch)
            ch = sch
        b.add("head", "head", [src], _head(seed, "head", ch, k))
    else:
        score = b.add("score_mid", "head", [src], _head(seed, "score_mid", ch, k))
        for level in reversed(range(spec.depth)):
            skip, sch = skips[level]
            up = b.add(f"up{level}", "upsample", [score], Upsample())
            side = b.add(f"score{level}", "head", [skip], _head(seed, f"score{level}", sch, k))
            score = b.add(f"fuse{level}", "add", [up, side], Add())
    return LayerGraph(spec, b.nodes)


def block_channels(spec: NetworkSpec):
    """Output channel count of every bc/fbc block, in graph order."""
    return [n.module.conv.params["w"].shape[3] for n in build(spec).nodes if isinstance(n.module, Block)]


def cff_param_delta(spec: NetworkSpec):
    """Closed-form parameter overhead of the filters: sum of k^2*ch^2 + ch."""
    k = spec.cff_kernel_size
    return sum(k * k * ch * ch + ch for ch in block_channels(spec))


def count_params(graph: LayerGraph):
    return graph.count_params()


def predict(graph: LayerGraph, x):
    """Per-pixel argmax label map from an eval-mode forward pass."""
    return graph.forward(x, train=False).argmax(axis=-1)
