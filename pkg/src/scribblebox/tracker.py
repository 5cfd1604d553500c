"""Pluggable single-object box tracker with a built-in ZNCC implementation.

The built-in tracker scans a zero-normalized cross-correlation of a fixed
grayscale template over a search window around the prior box, across a small
scale pyramid. Anything matching the `step_fn` signature of `track_step` can
be substituted (tests use identity stubs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Box, ObservedTrack, ParameterError
from .features import resize_bilinear, to_gray
from .kernels import zncc_scores


@dataclass(frozen=True)
class TrackerConfig:
    search_margin: float = 25.0
    scale_set: tuple[float, ...] = (0.95, 1.0, 1.05)
    stride: int = 1

    def __post_init__(self):
        if self.search_margin < 0:
            raise ParameterError("search_margin must be >= 0")
        if any(s <= 0 for s in self.scale_set):
            raise ParameterError("scales must be positive")


@dataclass(frozen=True)
class TrackerTemplate:
    patch: np.ndarray  # grayscale float, (h, w)
    source_box: Box


def make_template(frame: np.ndarray, box: Box) -> TrackerTemplate:
    """Grayscale template cut at the box, clamped to the image."""
    gray = to_gray(frame)
    h, w = gray.shape
    x0, y0, x1, y1 = box.corners()
    x0 = int(np.clip(round(x0), 0, w - 1))
    y0 = int(np.clip(round(y0), 0, h - 1))
    x1 = int(np.clip(round(x1), x0 + 1, w))
    y1 = int(np.clip(round(y1), y0 + 1, h))
    return TrackerTemplate(patch=gray[y0:y1, x0:x1].copy(), source_box=box)


def _clip_rect(x0, y0, x1, y1, w, h):
    return (
        int(np.clip(np.floor(x0), 0, w)),
        int(np.clip(np.floor(y0), 0, h)),
        int(np.clip(np.ceil(x1), 0, w)),
        int(np.clip(np.ceil(y1), 0, h)),
    )


def track_step(
    frame: np.ndarray,
    template: TrackerTemplate,
    prior: Box,
    window: Box | None,
    cfg: TrackerConfig = TrackerConfig(),
) -> tuple[Box, float]:
    """Best ZNCC placement of the template near the prior.

    The search region is the prior expanded by the margin, intersected with
    `window` when given and clamped to the image. Returns the winning box and
    the correlation score mapped to [0, 1]. A degenerate search region (or one
    no scaled template fits into) returns the prior with confidence 0.
    """
    gray = to_gray(frame)
    ih, iw = gray.shape
    sx0, sy0, sx1, sy1 = prior.expand(cfg.search_margin).corners()
    if window is not None:
        wx0, wy0, wx1, wy1 = window.corners()
        sx0, sy0 = max(sx0, wx0), max(sy0, wy0)
        sx1, sy1 = min(sx1, wx1), min(sy1, wy1)
    sx0, sy0, sx1, sy1 = _clip_rect(sx0, sy0, sx1, sy1, iw, ih)
    if sx1 - sx0 <= 0 or sy1 - sy0 <= 0:
        return prior, 0.0
    search = gray[sy0:sy1, sx0:sx1]
    th, tw = template.patch.shape

    best_score = -np.inf
    best_center = None
    best_scale = 1.0
    # Scale 1.0 first so exact matches win ties deterministically.
    for s in sorted(cfg.scale_set, key=lambda v: abs(v - 1.0)):
        sth = max(1, int(round(th * s)))
        stw = max(1, int(round(tw * s)))
        if sth > search.shape[0] or stw > search.shape[1]:
            continue
        tmpl = template.patch if (sth, stw) == (th, tw) else resize_bilinear(template.patch, sth, stw)
        scores = zncc_scores(search, tmpl)
        if cfg.stride > 1:
            sub = scores[:: cfg.stride, :: cfg.stride]
            ys, xs = np.nonzero(sub == sub.max())
            ys, xs = ys * cfg.stride, xs * cfg.stride
            top = sub.max()
        else:
            top = scores.max()
            ys, xs = np.nonzero(scores == top)
        if top <= best_score:
            continue
        # Among equal-score placements prefer the one closest to the prior.
        cy = sy0 + ys + sth / 2.0
        cx = sx0 + xs + stw / 2.0
        d2 = (cx - prior.cx) ** 2 + (cy - prior.cy) ** 2
        k = int(np.argmin(d2))
        best_score = float(top)
        best_center = (float(cx[k]), float(cy[k]))
        best_scale = s

    if best_center is None:
        return prior, 0.0
    out = Box(
        best_center[0],
        best_center[1],
        template.source_box.w * best_scale,
        template.source_box.h * best_scale,
    )
    if window is not None:
        out = clamp_box_into(out, window)
    conf = float(np.clip((best_score + 1.0) / 2.0, 0.0, 1.0))
    return out, conf


def clamp_box_into(box: Box, window: Box) -> Box:
    """Shift the box center so it lies inside the window (size preserved,
    shrunk only if larger than the window)."""
    wx0, wy0, wx1, wy1 = window.corners()
    w = min(box.w, wx1 - wx0)
    h = min(box.h, wy1 - wy0)
    cx = float(np.clip(box.cx, wx0 + w / 2.0, wx1 - w / 2.0))
    cy = float(np.clip(box.cy, wy0 + h / 2.0, wy1 - h / 2.0))
    return Box(cx, cy, w, h)


def run_track(
    video: np.ndarray,
    init_box: Box,
    start: int = 0,
    cfg: TrackerConfig = TrackerConfig(),
    step_fn=track_step,
) -> ObservedTrack:
    """Track from `start` to the last frame; the template is fixed at the
    start frame and the prior chains through the sequence."""
    if len(video) == 0:
        raise ParameterError("empty video")
    if not 0 <= start < len(video):
        raise ParameterError(f"start frame {start} outside video")
    template = make_template(video[start], init_box)
    boxes = [init_box]
    prior = init_box
    for f in range(start + 1, len(video)):
        prior, _ = step_fn(video[f], template, prior, None, cfg)
        boxes.append(prior)
    return ObservedTrack(start=start, boxes=tuple(boxes))
