"""Box-track annotation via a parametric piecewise-linear curve.

A curve with N control points is fitted to a tracker's per-frame boxes by
subgradient descent on an L1 matching cost over K paired samples. Annotator
corrections snap control points and trigger a tracker re-run plus a refit of
the suffix; a final pass re-runs the tracker inside crops around the curve to
tighten per-frame boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import (
    MIN_TIME_GAP,
    AnnotationSession,
    Box,
    ControlPoint,
    NumericError,
    ObservedTrack,
    ParameterError,
    RejectedEditError,
    TrajectoryCurve,
    curve_to_track,
    interpolate,
    sample_curve,
)
from .tracker import TrackerConfig, make_template, track_step

# Smallest box side kept during optimization, in pixels.
MIN_BOX_SIZE = 1e-3


@dataclass(frozen=True)
class FitConfig:
    n_points: int = 10
    k_samples: int = 300
    steps: int = 100
    lr: float = 0.5
    time_gap: float = MIN_TIME_GAP

    def __post_init__(self):
        if self.n_points < 2:
            raise ParameterError("need at least 2 control points")
        if self.k_samples < self.n_points:
            raise ParameterError("need at least as many samples as control points")
        if self.steps < 1 or self.lr <= 0:
            raise ParameterError("steps must be >= 1 and lr > 0")


def nearest_frame(t: float) -> int:
    """Nearest integer frame; exact .5 ties round down."""
    return int(math.ceil(t - 0.5))


def init_control_points(track: ObservedTrack, n_points: int) -> TrajectoryCurve:
    """Control points at uniform times over the track's range, each box read
    from the track at the nearest integer frame."""
    m = len(track)
    if n_points < 2:
        raise ParameterError("need at least 2 control points")
    if m < n_points:
        raise ParameterError(f"track length {m} < control-point count {n_points}")
    times = np.linspace(track.start, track.end, n_points)
    pts = [ControlPoint(float(t), track.box_at(nearest_frame(float(t)))) for t in times]
    return TrajectoryCurve(tuple(pts))


def _sample_grids(curve: TrajectoryCurve, track: ObservedTrack, k: int):
    curve_ts = np.linspace(curve.t_start, curve.t_end, k)
    track_ts = np.linspace(track.start, track.end, k)
    return curve_ts, track_ts


def _check_bound(curve: TrajectoryCurve, track: ObservedTrack):
    if abs(curve.t_start - track.start) > 1e-6 or abs(curve.t_end - track.end) > 1e-6:
        raise ParameterError(
            f"curve domain [{curve.t_start}, {curve.t_end}] not bound to "
            f"track frames [{track.start}, {track.end}]"
        )


def match_cost(curve: TrajectoryCurve, track: ObservedTrack, k: int = 300) -> float:
    """L1 matching cost between K curve samples (uniform in the curve domain)
    and K track samples (uniform over the frame range), paired by index."""
    _check_bound(curve, track)
    curve_ts, track_ts = _sample_grids(curve, track, k)
    p = sample_curve(curve, curve_ts)
    j = track.sample_at(track_ts)
    return float(np.abs(p - j).sum())


def match_cost_grad(curve: TrajectoryCurve, track: ObservedTrack, k: int = 300) -> np.ndarray:
    """Exact subgradient of match_cost wrt the (N, 5) control-point matrix
    (columns t, cx, cy, w, h); sign(0) contributes 0 at ties.

    The time channel of a curve sample equals the sample time identically, so
    it carries no gradient; times receive gradient only through the segment
    weights of the box channels.
    """
    _check_bound(curve, track)
    curve_ts, track_ts = _sample_grids(curve, track, k)
    knots = curve.times
    boxes = curve.matrix()[:, 1:]
    n = curve.n_points
    t = np.clip(curve_ts, knots[0], knots[-1])
    seg = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, n - 2)
    h = knots[seg + 1] - knots[seg]
    a = (knots[seg + 1] - t) / h
    b = (t - knots[seg]) / h
    p_box = boxes[seg] * a[:, None] + boxes[seg + 1] * b[:, None]
    j = track.sample_at(track_ts)
    sgn = np.sign(p_box - j[:, 1:])

    grad = np.zeros((n, 5), dtype=np.float64)
    np.add.at(grad[:, 1:], seg, sgn * a[:, None])
    np.add.at(grad[:, 1:], seg + 1, sgn * b[:, None])
    gap = boxes[seg] - boxes[seg + 1]  # (K, 4)
    coef = (sgn * gap).sum(axis=1)
    np.add.at(grad[:, 0], seg, coef * a / h)
    np.add.at(grad[:, 0], seg + 1, coef * b / h)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient in match cost")
    return grad


def kink_margin(curve: TrajectoryCurve, track: ObservedTrack, k: int = 300) -> float:
    """Distance of the cost to its nearest non-smooth point: the smallest
    |residual| over box terms and the smallest sample-to-interior-knot gap."""
    curve_ts, track_ts = _sample_grids(curve, track, k)
    p = sample_curve(curve, curve_ts)
    j = track.sample_at(track_ts)
    res = np.abs(p[:, 1:] - j[:, 1:]).min() if k > 0 else np.inf
    interior = curve.times[1:-1]
    if len(interior):
        knot_gap = np.abs(curve_ts[:, None] - interior[None, :]).min()
    else:
        knot_gap = np.inf
    return float(min(res, knot_gap))


def _project_matrix(m: np.ndarray, t0: float, t1: float, gap: float) -> np.ndarray:
    """Clamp times to ordered-with-gap within [t0, t1] and box sizes positive."""
    out = m.copy()
    out[0, 0] = t0
    out[-1, 0] = t1
    for _ in range(2):
        for i in range(1, len(out) - 1):
            out[i, 0] = max(out[i, 0], out[i - 1, 0] + gap)
        for i in range(len(out) - 2, 0, -1):
            out[i, 0] = min(out[i, 0], out[i + 1, 0] - gap)
    out[:, 3:5] = np.maximum(out[:, 3:5], MIN_BOX_SIZE)
    return out


def fit_curve(
    init: TrajectoryCurve,
    track: ObservedTrack,
    cfg: FitConfig = FitConfig(),
    frozen: Optional[np.ndarray] = None,
) -> TrajectoryCurve:
    """Subgradient descent on match_cost over the free control-point
    coordinates (endpoint times are always pinned; `frozen` masks more).

    Each coordinate moves against its subgradient sign with a multiplicative
    per-coordinate step (grown while the sign is stable, halved when it
    flips), starting at cfg.lr pixels. The best-cost iterate seen is returned,
    so the result never costs more than the input.
    """
    _check_bound(init, track)
    n = init.n_points
    free = np.ones((n, 5), dtype=bool)
    free[0, 0] = False
    free[-1, 0] = False
    if frozen is not None:
        free &= ~np.asarray(frozen, dtype=bool)
    if not free.any():
        return init

    cur = init.matrix()
    cur_curve = init
    best = cur
    best_cost = match_cost(init, track, cfg.k_samples)
    step = np.full((n, 5), cfg.lr)
    prev_sign = np.zeros((n, 5))
    for _ in range(cfg.steps):
        g = match_cost_grad(cur_curve, track, cfg.k_samples)
        g[~free] = 0.0
        sign = np.sign(g)
        agree = sign * prev_sign
        step[agree > 0] *= 1.2
        step[agree < 0] *= 0.5
        np.clip(step, 1e-9, 40.0 * cfg.lr, out=step)
        cur = _project_matrix(cur - sign * step, init.t_start, init.t_end, cfg.time_gap)
        cur_curve = TrajectoryCurve.from_matrix(cur)
        cost = match_cost(cur_curve, track, cfg.k_samples)
        if cost < best_cost:
            best_cost = cost
            best = cur
        prev_sign = sign
    return TrajectoryCurve.from_matrix(best) if best is not cur else cur_curve


def keyframes(curve: TrajectoryCurve) -> list[int]:
    """Nearest integer frame per control point, deduplicated and ascending."""
    return sorted({nearest_frame(p.t) for p in curve.points})


@dataclass(frozen=True)
class CurveEdit:
    kind: str  # move | add | remove
    index: int = -1
    new_point: Optional[ControlPoint] = None

    def payload(self) -> dict:
        d = {"kind": self.kind, "index": self.index}
        if self.new_point is not None:
            p = self.new_point
            d["point"] = {"t": p.t, "cx": p.box.cx, "cy": p.box.cy, "w": p.box.w, "h": p.box.h}
        return d


def _edit_points(points: tuple[ControlPoint, ...], edit: CurveEdit) -> tuple[tuple[ControlPoint, ...], int]:
    """New point tuple plus the click cost of the edit."""
    pts = list(points)
    if edit.kind == "move":
        if not 0 <= edit.index < len(pts):
            raise RejectedEditError(f"no control point at index {edit.index}")
        if edit.new_point is None:
            raise RejectedEditError("move edit needs a new point")
        old = pts[edit.index]
        clicks = 0
        if old.box != edit.new_point.box:
            clicks += 2
        if old.t != edit.new_point.t:
            clicks += 1
        pts[edit.index] = edit.new_point
        return tuple(pts), clicks
    if edit.kind == "add":
        if edit.new_point is None:
            raise RejectedEditError("add edit needs a new point")
        pts.append(edit.new_point)
        pts.sort(key=lambda p: p.t)
        return tuple(pts), 2
    if edit.kind == "remove":
        if not 0 <= edit.index < len(pts):
            raise RejectedEditError(f"no control point at index {edit.index}")
        del pts[edit.index]
        return tuple(pts), 1
    raise RejectedEditError(f"unknown edit kind {edit.kind!r}")


def apply_edit(session: AnnotationSession, edit: CurveEdit) -> AnnotationSession:
    """Apply a control-point edit; raises RejectedEditError if the resulting
    curve would violate ordering, gap or size invariants."""
    new_pts, clicks = _edit_points(session.curve.points, edit)
    try:
        new_curve = TrajectoryCurve(new_pts)
    except ParameterError as e:
        raise RejectedEditError(str(e)) from e
    return session.with_event("curve_edit", edit.payload(), clicks=clicks, curve=new_curve)


def _insert_snapped(points: tuple[ControlPoint, ...], frame: float, box: Box, gap: float) -> tuple[ControlPoint, ...]:
    """Point list with a control point exactly at t=frame, replacing the owner
    of that keyframe if any; neighbors closer than the minimum gap are nudged
    away (or dropped when nudging is impossible)."""
    kept = [p for p in points if nearest_frame(p.t) != nearest_frame(frame)]
    out = []
    placed = ControlPoint(float(frame), box)
    for p in sorted(kept, key=lambda q: q.t):
        if abs(p.t - frame) >= gap:
            out.append(p)
            continue
        nudged_t = frame - gap if p.t < frame else frame + gap
        # Keep the nudged point only while it respects its other neighbor.
        ok = all(
            abs(nudged_t - q.t) >= gap - 1e-12
            for q in kept
            if q is not p and nearest_frame(q.t) != nearest_frame(frame)
        )
        if ok:
            out.append(ControlPoint(nudged_t, p.box))
    out.append(placed)
    out.sort(key=lambda q: q.t)
    return tuple(out)


def apply_box_correction(session: AnnotationSession, frame: int, box: Box) -> AnnotationSession:
    """Annotator confirms the box at a keyframe (2 clicks: two corners).

    The control point popped at that frame is snapped to time=frame with the
    new box; if no control point pops there, one is inserted. Unconfirmed
    neighbors violating the time gap are nudged aside so the confirmed point
    sits exactly at the corrected frame."""
    pts = _insert_snapped(session.curve.points, float(frame), box, MIN_TIME_GAP)
    new_curve = TrajectoryCurve(pts)
    payload = {"frame": frame, "box": {"cx": box.cx, "cy": box.cy, "w": box.w, "h": box.h}}
    return session.with_event("box_correction", payload, clicks=2, curve=new_curve)


def refit_suffix(
    session: AnnotationSession,
    corrected_frame: int,
    video: np.ndarray,
    cfg: FitConfig = FitConfig(),
    tracker_cfg: TrackerConfig = TrackerConfig(),
    step_fn=track_step,
) -> AnnotationSession:
    """Re-run the tracker from the corrected frame and refit only the control
    points after it; points at or before the corrected frame are untouched.

    The corrected frame must hold a confirmed control point (placed by
    apply_box_correction), whose box seeds the tracker template.
    """
    curve = session.curve
    anchor = None
    for p in curve.points:
        if abs(p.t - corrected_frame) <= 1e-6:
            anchor = p
            break
    if anchor is None:
        raise ParameterError(f"frame {corrected_frame} holds no confirmed control point")
    m = session.n_frames
    if corrected_frame >= m - 1:
        return session

    # Annotator-confirmed suffix points (earlier box corrections that still
    # own a control point) are kept frozen, and the tracker restarts from
    # each of them in turn: the re-track always runs from the last annotated
    # frame.
    confirmed_frames = {corrected_frame}
    for ev in session.event_log:
        if ev.kind == "box_correction":
            confirmed_frames.add(int(ev.payload["frame"]))
    by_time = {p.t: p for p in curve.points}
    anchors = [
        by_time[float(f)]
        for f in sorted(confirmed_frames)
        if f >= corrected_frame and float(f) in by_time
    ]

    boxes: list[Box] = []
    for i, a in enumerate(anchors):
        seg_end = int(anchors[i + 1].t) if i + 1 < len(anchors) else m
        template = make_template(video[int(a.t)], a.box)
        prior = a.box
        boxes.append(a.box)
        for f in range(int(a.t) + 1, seg_end):
            prior, _ = step_fn(video[f], template, prior, None, tracker_cfg)
            boxes.append(prior)
    suffix_track = ObservedTrack(start=corrected_frame, boxes=tuple(boxes))

    prefix = [p for p in curve.points if p.t < corrected_frame - 1e-6]
    n_suffix = min(
        1 + sum(1 for p in curve.points if p.t > corrected_frame + 1e-6),
        len(suffix_track),
    )
    if n_suffix < 2:
        return session
    # Seed free points uniformly over the suffix (their old times carry no
    # information about the new track), then give the confirmed anchors their
    # nearest slots.
    seeded = list(init_control_points(suffix_track, n_suffix).points)
    anchor_ts = [a.t for a in anchors]
    taken = set()
    for a in anchors:
        slot = min(
            (j for j in range(len(seeded)) if j not in taken),
            key=lambda j: abs(seeded[j].t - a.t),
        )
        seeded[slot] = a
        taken.add(slot)
    seeded.sort(key=lambda p: p.t)
    keep = [seeded[0]]
    for p in seeded[1:]:
        if p.t - keep[-1].t >= cfg.time_gap - 1e-9:
            keep.append(p)
        elif p.t in anchor_ts:  # never drop a confirmed point
            keep[-1] = p
    if len(keep) < 2:
        return session
    suffix_init = TrajectoryCurve(tuple(keep))
    frozen = np.zeros((suffix_init.n_points, 5), dtype=bool)
    for j, p in enumerate(suffix_init.points):
        if p.t in anchor_ts:
            frozen[j, :] = True
    fitted = fit_curve(suffix_init, suffix_track, cfg, frozen=frozen)
    new_curve = TrajectoryCurve(tuple(prefix) + fitted.points)
    return replace(session, curve=new_curve)


def refine_boxes(
    curve: TrajectoryCurve,
    video: np.ndarray,
    expansion: float = 25.0,
    tracker_cfg: TrackerConfig = TrackerConfig(),
    step_fn=track_step,
) -> ObservedTrack:
    """Per-frame boxes from re-running the tracker restricted to crops around
    the interpolated curve (each crop is the curve box expanded per side).

    Frames between two control points use the template cut at the nearest
    preceding keyframe, where the annotator has vouched for the box. Zero
    expansion leaves no search freedom and returns the interpolation."""
    m = len(video)
    if not curve.is_bound(m):
        raise ParameterError("curve not bound to the video")
    if expansion <= 0:
        return curve_to_track(curve, m)
    step_cfg = replace(tracker_cfg, search_margin=expansion)
    kfs = keyframes(curve)
    templates = {}
    boxes = []
    for f in range(m):
        kf = max((k for k in kfs if k <= f), default=kfs[0])
        if kf not in templates:
            templates[kf] = make_template(video[kf], interpolate(curve, float(kf)))
        prior = interpolate(curve, float(f))
        window = prior.expand(expansion)
        box, _ = step_fn(video[f], templates[kf], prior, window, step_cfg)
        boxes.append(box)
    return ObservedTrack(start=0, boxes=tuple(boxes))
