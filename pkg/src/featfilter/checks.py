"""Self-verification suites behind ``featfilter check``.

Each suite returns a list of :class:`CheckResult`; a suite passes when every
result passes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .entropy import (
    binarize,
    binary_entropy,
    layer_entropy_pair,
    noise_persistence_check,
    theorem1_check,
    BinaryDistribution,
)
from .layers import BatchNorm, Block, Cff, Conv, softmax_ce_loss
from .metrics import boundary, dice, hausdorff
from .nets import Concat
from .tensor import (
    ConvKernel,
    conv2d,
    conv2d_backward,
    maxpool2,
    maxpool2_backward,
    relu,
    sigmoid,
    upsample2,
    upsample2_backward,
)

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    value: float
    limit: float
    passed: bool

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3g} (limit {self.limit:.3g})"


def numerical_grad(fn, x, h=1e-6):
    """Central-difference gradient of scalar ``fn()`` w.r.t. array ``x``
    (perturbed in place and restored)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = fn()
        x[idx] = old - h
        fm = fn()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    """Max-norm error scaled by the larger max-norm of the two gradients."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 10, x)


def grad_suite(seed=0):
    """Finite-difference checks for every differentiable op (6x6x3 inputs)."""
    rng = np.random.default_rng(seed)
    results = []

    def add(name, analytic, numeric):
        err = rel_error(analytic, numeric)
        results.append(CheckResult(f"grad {name}", err, GRAD_TOL, err < GRAD_TOL))

    x = rng.normal(size=(6, 6, 3))
    k = ConvKernel(rng.normal(size=(3, 3, 3, 2)), rng.normal(size=2))
    g = rng.normal(size=(6, 6, 2))
    gx, gk = conv2d_backward(g, x, k)
    add("conv2d/input", gx, numerical_grad(lambda: (conv2d(x, k) * g).sum(), x))
    add("conv2d/weights", gk.weights, numerical_grad(lambda: (conv2d(x, k) * g).sum(), k.weights))
    add("conv2d/bias", gk.biases, numerical_grad(lambda: (conv2d(x, k) * g).sum(), k.biases))

    for train in (True, False):
        bn = BatchNorm(3)
        bn.params["gamma"][:] = rng.uniform(0.5, 1.5, 3)
        bn.params["beta"][:] = rng.normal(size=3)
        bn.state["running_mean"][:] = rng.normal(size=3)
        bn.state["running_var"][:] = rng.uniform(0.5, 2.0, 3)
        saved = {k_: v.copy() for k_, v in bn.state.items()}
        x = rng.normal(size=(6, 6, 3))
        g = rng.normal(size=x.shape)

        def loss():
            out = bn.forward(x, train)
            bn.state.update({k_: v.copy() for k_, v in saved.items()})
            return (out * g).sum()

        bn.forward(x, train)
        bn.state.update({k_: v.copy() for k_, v in saved.items()})
        gin = bn.backward(g)
        grads = dict(bn.grads)
        mode = "train" if train else "eval"
        add(f"batchnorm[{mode}]/input", gin, numerical_grad(loss, x))
        add(f"batchnorm[{mode}]/gamma", grads["gamma"], numerical_grad(loss, bn.params["gamma"]))
        add(f"batchnorm[{mode}]/beta", grads["beta"], numerical_grad(loss, bn.params["beta"]))

    x = _away_from_zero(rng, (6, 6, 3))
    g = rng.normal(size=x.shape)
    add("relu", g * (x > 0), numerical_grad(lambda: (relu(x) * g).sum(), x))
    s = sigmoid(x)
    add("sigmoid", g * s * (1 - s), numerical_grad(lambda: (sigmoid(x) * g).sum(), x))

    f = rng.normal(size=(6, 6, 3))
    cff = Cff(rng.normal(scale=0.5, size=(1, 1, 3, 3)), rng.normal(size=3))
    g = rng.normal(size=f.shape)
    cff.forward(f)
    gf = cff.backward(g)
    add("cff/input", gf, numerical_grad(lambda: (cff.forward(f) * g).sum(), f))
    add("cff/gate_weights", cff.grads["w"], numerical_grad(lambda: (cff.forward(f) * g).sum(), cff.params["w"]))
    add("cff/gate_bias", cff.grads["b"], numerical_grad(lambda: (cff.forward(f) * g).sum(), cff.params["b"]))

    for order in ("paper", "conventional"):
        blk = Block(Conv(rng.normal(size=(3, 3, 3, 3)), rng.normal(size=3)), BatchNorm(3),
                    Cff(rng.normal(scale=0.5, size=(1, 1, 3, 3)), rng.normal(size=3)), order)
        x = rng.normal(size=(6, 6, 3))
        g = rng.normal(size=x.shape)
        snap = {k_: v.copy() for k_, v in blk.bn.state.items()}

        def bloss():
            out = blk.forward(x, train=True)
            blk.bn.state.update({k_: v.copy() for k_, v in snap.items()})
            return (out * g).sum()

        bloss()
        blk.forward(x, train=True)
        blk.bn.state.update({k_: v.copy() for k_, v in snap.items()})
        gin = blk.backward(g)
        add(f"fbc[{order}]/input", gin, numerical_grad(bloss, x))
        add(f"fbc[{order}]/conv_weights", blk.conv.grads["w"], numerical_grad(bloss, blk.conv.params["w"]))

    x = rng.normal(size=(6, 6, 3))
    g = rng.normal(size=(3, 3, 3))
    _, idx = maxpool2(x)
    add("maxpool2", maxpool2_backward(g, idx), numerical_grad(lambda: (maxpool2(x)[0] * g).sum(), x))

    x = rng.normal(size=(3, 3, 3))
    g = rng.normal(size=(6, 6, 3))
    add("upsample2", upsample2_backward(g), numerical_grad(lambda: (upsample2(x) * g).sum(), x))

    a, b = rng.normal(size=(6, 6, 2)), rng.normal(size=(6, 6, 3))
    g = rng.normal(size=(6, 6, 5))
    cat = Concat()
    cat.forward(a, b)
    ga, gb = cat.backward(g)
    add("concat/first", ga, numerical_grad(lambda: (Concat().forward(a, b) * g).sum(), a))
    add("concat/second", gb, numerical_grad(lambda: (Concat().forward(a, b) * g).sum(), b))

    logits = rng.normal(size=(6, 6, 3))
    labels = rng.integers(0, 3, size=(6, 6))
    _, grad = softmax_ce_loss(logits, labels)
    add("softmax_ce", grad, numerical_grad(lambda: softmax_ce_loss(logits, labels)[0], logits))
    return results


def straight_line_entropy(values):
    """Density -> binarize -> entropy written out step by step in plain Python."""
    vals = [float(v) for v in np.ravel(values)]
    n = len(vals)
    mu = sum(vals) / n
    sigma = math.sqrt(sum((v - mu) ** 2 for v in vals) / n)
    if sigma < 1e-12:
        return 1.0
    p = [math.exp(-((v - mu) ** 2) / (2 * sigma**2)) / (sigma * math.sqrt(2 * math.pi)) for v in vals]
    pm = sum(map(Fraction, p)) / n  # exact mean
    a = sum(1 for q in p if Fraction(q) < pm) / n
    b = sum(1 for q in p if Fraction(q) > pm) / n
    if a >= b:
        return 1.0
    return -(a * math.log2(a) + b * math.log2(b))


def entropy_suite(n_trials=1000, seed=0):
    rng = np.random.default_rng(seed)
    results = []
    worst = 0.0
    violations = 0
    for _ in range(n_trials):
        shape = (int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 5)))
        f = rng.normal(size=shape) * rng.uniform(0.1, 5) + rng.normal()
        if rng.random() < 0.3:
            f = relu(f)
        cff = Cff(rng.normal(size=(1, 1, shape[2], shape[2])), rng.normal(size=shape[2]))
        d = cff.forward(f)
        hf, hd = layer_entropy_pair(f, d)
        worst = max(worst, abs(hf - straight_line_entropy(f)), abs(hd - straight_line_entropy(d)))
        nz = f != 0
        ok = (np.all(np.abs(d[nz]) < np.abs(f[nz])) and np.all(d[~nz] == 0)
              and np.all(np.sign(d) == np.sign(f)))
        violations += not ok
    results.append(CheckResult("entropy pipeline vs straight-line oracle", worst, 1e-12, worst <= 1e-12))
    results.append(CheckResult("low-amplitude pass violations", violations, 0, violations == 0))
    cases = [
        ("binarize [c,c,c,c]", binarize([3.0, 3.0, 3.0, 3.0]), BinaryDistribution(0.5, 0.5, "degenerate")),
        ("binarize [0,0,0,10]", binarize([0.0, 0.0, 0.0, 10.0]), BinaryDistribution(0.5, 0.5, "degenerate")),
        ("binarize [0,10,10,10]", binarize([0.0, 10.0, 10.0, 10.0]), BinaryDistribution(0.25, 0.75, "split")),
    ]
    for name, got, want in cases:
        results.append(CheckResult(name, float(got != want), 0, got == want))
    h = binary_entropy(BinaryDistribution(0.5, 0.5, "degenerate"))
    results.append(CheckResult("H{0.5,0.5} == 1", abs(h - 1.0), 0, h == 1.0))
    return results


def theorem1_suite(mu=0.0, sigma=1.0, a=2.0, b=3.0, n_samples=100_000, seed=0):
    mean, var = theorem1_check(mu, sigma, a, b, n_samples, seed)
    want_mean, want_var = a * mu + b, a * a * sigma * sigma
    se_mean = abs(a) * sigma / math.sqrt(n_samples)
    se_var = want_var * math.sqrt(2.0 / (n_samples - 1))
    return [
        CheckResult("a*X+b mean (std errors)", abs(mean - want_mean) / se_mean, 3.0,
                    abs(mean - want_mean) <= 3 * se_mean),
        CheckResult("a*X+b variance (std errors)", abs(var - want_var) / se_var, 3.0,
                    abs(var - want_var) <= 3 * se_var),
    ]


def linearity_suite(n_trials=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        x = rng.normal(size=(8, 8, cin))
        eps = rng.normal(size=x.shape)
        alpha = float(rng.uniform(0, 1))
        k = ConvKernel(rng.normal(size=(3, 3, cin, cout)), np.zeros(cout))
        worst = max(worst, noise_persistence_check(x, eps, alpha, 1.0 - alpha, k))
    return [CheckResult("convolution linearity residual", worst, 1e-10, worst < 1e-10)]


def _boundary_oracle(mask):
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < h and 0 <= nj < w) or not mask[ni, nj]:
                    pts.append((i, j))
                    break
    return pts


def hausdorff_oracle(a, b, pa=None, pb=None):
    """All-pairs Hausdorff distance between 4-connected mask boundaries.

    ``pa``/``pb`` may carry precomputed boundary point lists.
    """
    pa = _boundary_oracle(a) if pa is None else pa
    pb = _boundary_oracle(b) if pb is None else pb
    if not pa and not pb:
        return 0.0
    if not pa or not pb:
        return math.hypot(*a.shape)

    def directed(p, q):
        return max(min(math.hypot(i - k, j - l) for k, l in q) for i, j in p)

    return max(directed(pa, pb), directed(pb, pa))


def dice_oracle(a, b):
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def all_masks(h, w):
    for bits in range(1 << (h * w)):
        yield np.array([(bits >> i) & 1 for i in range(h * w)], dtype=bool).reshape(h, w)


EXHAUSTIVE_SHAPES = [(h, w) for h in range(1, 4) for w in range(1, 4)] + [(1, 4), (4, 1), (2, 4), (4, 2)]


def metrics_suite(n_random_4x4=20_000, seed=0):
    """Dice/Hausdorff against brute force: every mask pair for grids up to
    3x3 (plus 1x4, 2x4 and transposes), every 4x4 boundary, and a random
    sample of 4x4 pairs."""
    worst_d = worst_h = 0.0
    for h, w in EXHAUSTIVE_SHAPES:
        masks = list(all_masks(h, w))
        ints = [m.astype(int) for m in masks]
        bnd = [_boundary_oracle(m) for m in masks]
        for i, j in itertools.product(range(len(masks)), repeat=2):
            a, b = masks[i], masks[j]
            worst_d = max(worst_d, abs(dice(ints[i], ints[j], 1) - dice_oracle(a, b)))
            want = hausdorff_oracle(a, b, bnd[i], bnd[j])
            worst_h = max(worst_h, abs(hausdorff(ints[i], ints[j], 1) - want))
    bad_boundaries = 0
    for m in all_masks(4, 4):
        got = {tuple(p) for p in np.argwhere(boundary(m))}
        bad_boundaries += got != set(_boundary_oracle(m))
    rng = np.random.default_rng(seed)
    for _ in range(n_random_4x4):
        a = rng.random((4, 4)) < rng.random()
        b = rng.random((4, 4)) < rng.random()
        worst_d = max(worst_d, abs(dice(a.astype(int), b.astype(int), 1) - dice_oracle(a, b)))
        worst_h = max(worst_h, abs(hausdorff(a.astype(int), b.astype(int), 1) - hausdorff_oracle(a, b)))
    same = np.zeros((4, 4), int)
    same[1:3, 1:3] = 1
    disjoint = np.zeros((4, 4), int)
    disjoint[0, :] = 1
    other = np.zeros((4, 4), int)
    other[3, :] = 1
    half_a = np.zeros((4, 4), int)
    half_a[0:2, 0:2] = 1
    half_b = np.zeros((4, 4), int)
    half_b[0:2, 1:3] = 1
    p1 = np.zeros((4, 5), int)
    p1[0, 0] = 1
    p2 = np.zeros((4, 5), int)
    p2[3, 4] = 1
    return [
        CheckResult("4x4 boundary mismatches", bad_boundaries, 0, bad_boundaries == 0),
        CheckResult("dice vs brute force", worst_d, 1e-12, worst_d <= 1e-12),
        CheckResult("hausdorff vs brute force", worst_h, 1e-12, worst_h <= 1e-12),
        CheckResult("dice identical == 1", abs(dice(same, same, 1) - 1.0), 0, dice(same, same, 1) == 1.0),
        CheckResult("dice disjoint == 0", dice(disjoint, other, 1), 0, dice(disjoint, other, 1) == 0.0),
        CheckResult("dice half overlap == 0.5", abs(dice(half_a, half_b, 1) - 0.5), 0,
                    dice(half_a, half_b, 1) == 0.5),
        CheckResult("hausdorff (0,0)-(3,4) == 5", abs(hausdorff(p1, p2, 1) - 5.0), 0,
                    hausdorff(p1, p2, 1) == 5.0),
    ]


SUITES = {
    "grad": grad_suite,
    "entropy": entropy_suite,
    "theorem1": theorem1_suite,
    "linearity": linearity_suite,
    "metrics": metrics_suite,
}
