"""Binary information entropy of feature signal matrices.

Pipeline for one matrix ``f``:

1. density: evaluate the normal pdf, fitted to ``f``'s own mean and
   population std, at every element;
2. binarize: count elements whose density is below / above the mean density;
3. entropy: base-2 binary entropy of the resulting pair.

``delta_entropy`` compares the pre-filter and post-filter matrices of each
filtered block; negative values mean the filter lowered uncertainty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .tensor import DTYPE, ConvKernel, ShapeError, conv2d

SIGMA_FLOOR = 1e-12
PROBE_TAGS = ("Es", "Esm", "Em", "Enm", "En")


@dataclass(frozen=True)
class GaussianParams:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")

    @staticmethod
    def fit(alpha):
        """Sample mean and population standard deviation of ``alpha``."""
        a = np.asarray(alpha, dtype=DTYPE)
        return float(a.mean()), float(a.std())


@dataclass
class ProbabilityMatrix:
    values: np.ndarray
    source_dims: tuple
    degenerate: bool = False


@dataclass(frozen=True)
class BinaryDistribution:
    a: float
    b: float
    branch: str  # "degenerate" or "split"

    def __post_init__(self):
        if self.branch == "degenerate":
            if not (self.a == 0.5 and self.b == 0.5):
                raise ValueError("degenerate branch must be {0.5, 0.5}")
        elif self.branch == "split":
            if not (0 < self.a < self.b and self.a + self.b <= 1):
                raise ValueError(f"invalid split distribution a={self.a}, b={self.b}")
        else:
            raise ValueError(f"unknown branch {self.branch!r}")


DEGENERATE = BinaryDistribution(0.5, 0.5, "degenerate")


@dataclass
class EntropyReport:
    layer_index: int
    tag: str
    Hf: float
    Hd: float

    @property
    def delta(self):
        return self.Hd - self.Hf


def extract_pixel_signal(f, i, j):
    """Channel vector of feature matrix ``f`` at pixel ``(i, j)``."""
    f = np.asarray(f)
    if f.ndim != 3:
        raise ShapeError(f"expected an (H, W, ch) matrix, got {f.shape}")
    h, w, _ = f.shape
    if not (0 <= i < h and 0 <= j < w):
        raise IndexError(f"pixel ({i}, {j}) outside {h}x{w}")
    return f[i, j].copy()


def gaussian_density(alpha, params: GaussianParams | None = None) -> ProbabilityMatrix:
    """Normal pdf evaluated elementwise at ``alpha``.

    Without ``params`` the mean and population std of ``alpha`` itself are
    used; if that std falls below ``SIGMA_FLOOR`` the matrix is constant and
    the result is flagged degenerate (values all 1).

    Densities of elements more than ~38 std from the mean underflow to 0.
    That cannot change binarization since such elements sit below the mean
    density either way.
    """
    a = np.asarray(alpha, dtype=DTYPE)
    if params is None:
        mu, sigma = GaussianParams.fit(a)
        if sigma < SIGMA_FLOOR:
            return ProbabilityMatrix(np.ones(a.size), a.shape, degenerate=True)
    else:
        mu, sigma = params.mu, params.sigma
    z = (a.ravel() - mu) / sigma
    vals = np.exp(-0.5 * z * z) / (sigma * math.sqrt(2.0 * math.pi))
    return ProbabilityMatrix(vals, a.shape)


def binarize(p) -> BinaryDistribution:
    """Split a probability matrix into (low, high) fractions around its mean.

    ``a`` is the fraction strictly below the mean, ``b`` strictly above;
    elements equal to the mean count towards neither. Returns the
    degenerate ``{0.5, 0.5}`` whenever ``a >= b``.
    """
    if isinstance(p, ProbabilityMatrix):
        if p.degenerate:
            return DEGENERATE
        vals = p.values
    else:
        vals = np.asarray(p, dtype=DTYPE).ravel()
    n = vals.size
    if n == 0:
        raise ValueError("cannot binarize an empty matrix")
    below, above = _mean_sides(vals)
    a, b = below / n, above / n
    if a >= b:
        return DEGENERATE
    return BinaryDistribution(a, b, "split")


def _mean_sides(vals):
    """Counts strictly below / above the mean, with exact rational tie-breaks.

    A rounded float mean can land on an element that is really below the
    true mean (two densities one ulp apart, say); elements within rounding
    distance of the mean are therefore re-compared exactly.
    """
    m = vals.mean()
    tol = 64 * np.finfo(DTYPE).eps * abs(m)
    near = np.abs(vals - m) <= tol
    below = int(np.count_nonzero((vals < m) & ~near))
    above = int(np.count_nonzero((vals > m) & ~near))
    if near.any():
        n = vals.size
        total = sum(map(Fraction, vals.tolist()))
        for v in vals[near].tolist():
            scaled = Fraction(v) * n
            below += scaled < total
            above += scaled > total
    return below, above


def binary_entropy(P: BinaryDistribution) -> float:
    if P.branch == "degenerate":
        return 1.0
    return -(P.a * math.log2(P.a) + P.b * math.log2(P.b))


def matrix_entropy(f) -> float:
    return binary_entropy(binarize(gaussian_density(f)))


def layer_entropy_pair(f, d):
    """``(Hf, Hd)`` for the pre- and post-filter matrices of one block."""
    f = np.asarray(f)
    d = np.asarray(d)
    if f.shape != d.shape:
        raise ShapeError(f"f {f.shape} and d {d.shape} must come from the same block")
    return matrix_entropy(f), matrix_entropy(d)


def delta_entropy(HF, HD):
    if len(HF) != len(HD):
        raise ValueError(f"length mismatch: {len(HF)} vs {len(HD)}")
    return [hd - hf for hf, hd in zip(HF, HD)]


def theorem1_check(mu, sigma, a, b, n_samples=100_000, seed=0):
    """Empirical mean and variance of ``a*X + b`` with ``X ~ N(mu, sigma^2)``."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    if n_samples < 10_000:
        raise ValueError("n_samples must be at least 1e4")
    x = np.random.default_rng(seed).normal(mu, sigma, size=int(n_samples))
    y = a * x + b
    return float(y.mean()), float(y.var(ddof=1))


def noise_persistence_check(x, eps, alpha, beta, kernel: ConvKernel):
    """Max residual of conv(alpha*x + beta*eps) - alpha*conv(x) - beta*conv(eps)."""
    if abs(alpha + beta - 1.0) > 1e-12:
        raise ValueError("alpha + beta must equal 1")
    if np.any(kernel.biases != 0):
        raise ValueError("kernel bias must be zero")
    x = np.asarray(x, dtype=DTYPE)
    eps = np.asarray(eps, dtype=DTYPE)
    if x.shape != eps.shape:
        raise ShapeError("x and eps must have identical dims")
    lhs = conv2d(alpha * x + beta * eps, kernel)
    rhs = alpha * conv2d(x, kernel) + beta * conv2d(eps, kernel)
    return float(np.abs(lhs - rhs).max())


# -- probing trained networks ---------------------------------------------------

def probe_layers(graph, samples, tag):
    """Average ``(Hf, Hd)`` per filtered block over ``samples`` (eval mode).

    ``graph`` is a built network with at least one fbc block.
    """
    if not graph.fbc_blocks():
        raise ValueError("network has no filter blocks; nothing to probe")
    if not samples:
        raise ValueError("need at least one sample to probe")
    sums = None
    for s in samples:
        graph.forward(s.image, train=False)
        pairs = np.array([layer_entropy_pair(f, d) for f, d in graph.probe_taps()])
        sums = pairs if sums is None else sums + pairs
    means = sums / len(samples)
    return [EntropyReport(i, str(tag), float(hf), float(hd)) for i, (hf, hd) in enumerate(means)]


def center_signals(graph, image):
    """``[(layer_index, f_vector, d_vector)]`` at the centre pixel of every
    filtered block, for one eval-mode forward pass."""
    graph.forward(image, train=False)
    out = []
    for i, (f, d) in enumerate(graph.probe_taps()):
        ci, cj = f.shape[0] // 2, f.shape[1] // 2
        out.append((i, extract_pixel_signal(f, ci, cj), extract_pixel_signal(d, ci, cj)))
    return out
