"""Dice score and Hausdorff distance for integer label maps (pixel units)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .tensor import ShapeError


@dataclass
class MetricsRow:
    class_id: int
    dice: float
    hausdorff: float


def _masks(pred, gt, class_id):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"label maps differ in dims: {pred.shape} vs {gt.shape}")
    return pred == class_id, gt == class_id


def dice(pred, gt, class_id):
    a, b = _masks(pred, gt, class_id)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def boundary(mask):
    """Mask pixels with a 4-neighbour outside the mask or on the image border."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def hausdorff(pred, gt, class_id):
    """Symmetric Hausdorff distance between the boundaries of two class masks.

    Both empty gives 0; exactly one empty gives the image diagonal
    ``sqrt(H^2 + W^2)``.
    """
    a, b = _masks(pred, gt, class_id)
    pa = np.argwhere(boundary(a))
    pb = np.argwhere(boundary(b))
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        h, w = a.shape
        return float(np.hypot(h, w))
    dist = cdist(pa, pb)
    return float(max(dist.min(axis=1).max(), dist.min(axis=0).max()))


def evaluate(pred, gt, num_classes):
    """One :class:`MetricsRow` per class, background included."""
    return [MetricsRow(c, dice(pred, gt, c), hausdorff(pred, gt, c)) for c in range(num_classes)]


def mean_seg(rows):
    """Mean Dice and mean Hausdorff over foreground (non-zero) classes."""
    fg = [r for r in rows if r.class_id != 0]
    if not fg:
        raise ValueError("mean_seg needs at least one foreground row")
    return (sum(r.dice for r in fg) / len(fg), sum(r.hausdorff for r in fg) / len(fg))
