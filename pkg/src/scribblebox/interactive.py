"""Single-frame mask correction from scribbles with a locality restriction.

New predictions only take effect within a Chebyshev radius of the user's
strokes; everything farther away keeps the previous mask bit-for-bit.
"""

from __future__ import annotations

import math

import numpy as np

from .core import ParameterError, ScribbleMap
from .features import FeatureGrid, interp_matrix, mask_to_grid, scribbles_to_grid
from .kernels import chebyshev_dilate
from .model import SegModel


def locality_gate(
    prev_mask: np.ndarray,
    new_mask: np.ndarray,
    scribbles: ScribbleMap,
    radius: float = 10,
) -> np.ndarray:
    """new_mask within Chebyshev distance <= radius of any scribble pixel,
    prev_mask (exact copy) everywhere else. An infinite radius passes the new
    mask through."""
    prev = np.asarray(prev_mask)
    new = np.asarray(new_mask)
    if prev.shape != new.shape or prev.shape != scribbles.shape:
        raise ParameterError("mask and scribble shapes must match")
    if math.isinf(radius):
        return new.copy()
    if scribbles.is_empty():
        return prev.copy()
    region = chebyshev_dilate(scribbles.union(), int(radius))
    return np.where(region, new, prev)


def interactive_logits(
    features: FeatureGrid,
    prev_grid: np.ndarray,
    pos_grid: np.ndarray,
    neg_grid: np.ndarray,
    model: SegModel,
) -> np.ndarray:
    """Per-cell logits of the interactive head over
    concat{feature, previous mask, positive, negative}."""
    x = np.concatenate(
        [
            features.flat(),
            np.asarray(prev_grid, dtype=np.float64).reshape(-1, 1),
            np.asarray(pos_grid, dtype=np.float64).reshape(-1, 1),
            np.asarray(neg_grid, dtype=np.float64).reshape(-1, 1),
        ],
        axis=1,
    )
    if x.shape[1] != model.inter_w.shape[0]:
        raise ParameterError(
            f"interactive head dim {model.inter_w.shape[0]} != input dim {x.shape[1]}"
        )
    return (x @ model.inter_w + model.inter_b).reshape(features.height, features.width)


def refine_mask(
    features: FeatureGrid,
    prev_mask: np.ndarray,
    scribbles: ScribbleMap,
    model: SegModel,
) -> np.ndarray:
    """Refined crop-resolution mask honoring the scribbles near them and the
    previous mask away from them. Empty scribbles return the previous mask
    unchanged."""
    prev = np.asarray(prev_mask, dtype=np.float64)
    size = features.height * features.stride
    if prev.shape != (size, features.width * features.stride):
        raise ParameterError(f"prev mask shape {prev.shape} != crop {(size, size)}")
    if scribbles.shape != prev.shape:
        raise ParameterError("scribbles must be at crop resolution")
    if scribbles.is_empty():
        return prev.copy()
    s = features.stride
    prev_grid = mask_to_grid(prev, s)
    pos_g, neg_g = scribbles_to_grid(scribbles.positive, scribbles.negative, s)
    z = interactive_logits(features, prev_grid, pos_g, neg_g, model)
    cells = 1.0 / (1.0 + np.exp(-z))
    ry = interp_matrix(features.height * s, features.height)
    rx = interp_matrix(features.width * s, features.width)
    new = ry @ cells @ rx.T
    return locality_gate(prev, new, scribbles, model.gate_radius)
