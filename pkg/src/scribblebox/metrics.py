"""Box IoU, region Jaccard J, boundary F and the combined J&F score."""

from __future__ import annotations

import math

import numpy as np

from .core import Box, ParameterError, binarize
from .kernels import chebyshev_dilate


def box_iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two axis-aligned boxes."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return float(inter / union)


def region_jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """|pred & gt| / |pred | gt| on binarized masks; 1.0 when both are empty."""
    p = binarize(pred)
    g = binarize(gt)
    if p.shape != g.shape:
        raise ParameterError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(p & g) / union)


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels 4-adjacent to background; the image border counts as
    background."""
    m = binarize(mask)
    padded = np.zeros((m.shape[0] + 2, m.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = m
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def default_boundary_tol(shape: tuple[int, int]) -> int:
    return max(1, round(0.008 * math.hypot(shape[0], shape[1])))


def boundary_f(pred: np.ndarray, gt: np.ndarray, tol: float | None = None) -> float:
    """Boundary F-measure: precision/recall of boundary pixels within a
    Chebyshev tolerance (default 0.008 x image diagonal, min 1)."""
    p = binarize(pred)
    g = binarize(gt)
    if p.shape != g.shape:
        raise ParameterError(f"mask shapes differ: {p.shape} vs {g.shape}")
    pb = mask_boundary(p)
    gb = mask_boundary(g)
    n_p = int(pb.sum())
    n_g = int(gb.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if tol is None:
        tol = default_boundary_tol(p.shape)
    if math.isinf(tol):
        precision = 1.0 if n_p > 0 else 0.0
        recall = 1.0 if n_g > 0 else 0.0
    else:
        r = int(tol)
        g_zone = chebyshev_dilate(gb, r)
        p_zone = chebyshev_dilate(pb, r)
        precision = float((pb & g_zone).sum() / n_p) if n_p > 0 else 0.0
        recall = float((gb & p_zone).sum() / n_g) if n_g > 0 else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def jf_frame(pred: np.ndarray, gt: np.ndarray, tol: float | None = None) -> float:
    return 0.5 * (region_jaccard(pred, gt) + boundary_f(pred, gt, tol))


def jf(pred_seq, gt_seq, tol: float | None = None) -> float:
    """Mean over frames of (J + F) / 2."""
    preds = list(pred_seq)
    gts = list(gt_seq)
    if len(preds) != len(gts):
        raise ParameterError(f"sequence lengths differ: {len(preds)} vs {len(gts)}")
    if not preds:
        raise ParameterError("empty sequences")
    return float(np.mean([jf_frame(p, g, tol) for p, g in zip(preds, gts)]))
