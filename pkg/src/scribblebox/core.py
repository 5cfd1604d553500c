"""Domain types and the trajectory-curve evaluation primitives.

Boxes are center+size in pixels. A trajectory curve is an ordered list of
control points (t, cx, cy, w, h) interpolated piecewise-linearly in t; an
observed track is one box per integer frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

# Minimum time gap between consecutive control points, in frame units.
MIN_TIME_GAP = 0.5

# Columns of a control-point 5-vector.
COLS = ("t", "cx", "cy", "w", "h")


class ScribbleBoxError(Exception):
    """Base error for this package."""


class ParameterError(ScribbleBoxError):
    """Invalid argument or precondition violation."""


class OutOfRangeError(ScribbleBoxError):
    """Query outside the curve's time domain."""


class NumericError(ScribbleBoxError):
    """Non-finite value encountered during optimization."""


class RejectedEditError(ScribbleBoxError):
    """Curve edit that would violate the curve invariants."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: center (cx, cy) and positive size (w, h), in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ParameterError(f"box fields must be finite, got {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ParameterError(f"box size must be positive, got w={self.w} h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Box":
        cx, cy, w, h = (float(v) for v in a)
        return Box(cx, cy, w, h)

    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) corner form."""
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    @staticmethod
    def from_corners(x0: float, y0: float, x1: float, y1: float) -> "Box":
        return Box((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    def expand(self, margin: float) -> "Box":
        return Box(self.cx, self.cy, self.w + 2.0 * margin, self.h + 2.0 * margin)


@dataclass(frozen=True)
class ControlPoint:
    """A curve vertex: continuous time t plus the box at that time."""

    t: float
    box: Box

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise ParameterError(f"control-point time must be finite, got {self.t}")

    def as_array(self) -> np.ndarray:
        return np.array([self.t, self.box.cx, self.box.cy, self.box.w, self.box.h])


@dataclass(frozen=True)
class TrajectoryCurve:
    """Piecewise-linear box trajectory over N >= 2 strictly-ordered control points."""

    points: tuple[ControlPoint, ...]

    def __post_init__(self):
        if len(self.points) < 2:
            raise ParameterError("curve needs at least 2 control points")
        ts = [p.t for p in self.points]
        for a, b in zip(ts, ts[1:]):
            if b - a < MIN_TIME_GAP:
                raise ParameterError(
                    f"control-point times must increase by >= {MIN_TIME_GAP}, got {a} -> {b}"
                )

    @staticmethod
    def from_points(points: Iterable[ControlPoint]) -> "TrajectoryCurve":
        return TrajectoryCurve(tuple(points))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "TrajectoryCurve":
        """Build from an (N, 5) array with columns (t, cx, cy, w, h)."""
        pts = [ControlPoint(float(r[0]), Box.from_array(r[1:])) for r in np.asarray(m)]
        return TrajectoryCurve(tuple(pts))

    def matrix(self) -> np.ndarray:
        """(N, 5) array with columns (t, cx, cy, w, h)."""
        return np.stack([p.as_array() for p in self.points])

    @property
    def times(self) -> np.ndarray:
        return np.array([p.t for p in self.points], dtype=np.float64)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def t_start(self) -> float:
        return self.points[0].t

    @property
    def t_end(self) -> float:
        return self.points[-1].t

    def is_bound(self, n_frames: int, tol: float = 1e-9) -> bool:
        return abs(self.t_start) <= tol and abs(self.t_end - (n_frames - 1)) <= tol


@dataclass(frozen=True)
class ObservedTrack:
    """Per-frame boxes over consecutive frame indices starting at `start`."""

    start: int
    boxes: tuple[Box, ...]

    def __post_init__(self):
        if len(self.boxes) == 0:
            raise ParameterError("track must be nonempty")

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def end(self) -> int:
        """Last covered frame index."""
        return self.start + len(self.boxes) - 1

    @property
    def frames(self) -> range:
        return range(self.start, self.end + 1)

    def box_at(self, frame: int) -> Box:
        if not self.start <= frame <= self.end:
            raise OutOfRangeError(f"frame {frame} outside track [{self.start}, {self.end}]")
        return self.boxes[frame - self.start]

    def matrix(self) -> np.ndarray:
        """(M, 5) array with columns (t, cx, cy, w, h), t = frame index."""
        m = np.empty((len(self.boxes), 5), dtype=np.float64)
        for i, b in enumerate(self.boxes):
            m[i, 0] = self.start + i
            m[i, 1:] = b.as_array()
        return m

    def sample_at(self, ts: np.ndarray) -> np.ndarray:
        """(K, 5) track values at continuous times, linearly interpolated
        between neighboring integer frames."""
        ts = np.asarray(ts, dtype=np.float64)
        if np.any(ts < self.start - 1e-9) or np.any(ts > self.end + 1e-9):
            raise OutOfRangeError("sample times outside the track's frame range")
        rel = np.clip(ts - self.start, 0.0, len(self.boxes) - 1.0)
        lo = np.floor(rel).astype(int)
        lo = np.minimum(lo, len(self.boxes) - 2) if len(self.boxes) > 1 else lo * 0
        frac = rel - lo
        m = self.matrix()[:, 1:]
        hi = np.minimum(lo + 1, len(self.boxes) - 1)
        vals = m[lo] * (1.0 - frac)[:, None] + m[hi] * frac[:, None]
        out = np.empty((len(ts), 5), dtype=np.float64)
        out[:, 0] = ts
        out[:, 1:] = vals
        return out


def interpolate(curve: TrajectoryCurve, t: float) -> Box:
    """Box at time t: convex combination of the bracketing control points,
    exact at the control points themselves."""
    if t < curve.t_start - 1e-9 or t > curve.t_end + 1e-9:
        raise OutOfRangeError(f"t={t} outside curve domain [{curve.t_start}, {curve.t_end}]")
    return Box.from_array(sample_curve(curve, np.array([t]))[0, 1:])


def sample_curve(curve: TrajectoryCurve, ts: np.ndarray) -> np.ndarray:
    """(K, 5) curve values [t, cx, cy, w, h] at the given times (in-domain)."""
    ts = np.asarray(ts, dtype=np.float64)
    knots = curve.times
    m = curve.matrix()[:, 1:]
    t = np.clip(ts, knots[0], knots[-1])
    seg = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, len(knots) - 2)
    t0 = knots[seg]
    t1 = knots[seg + 1]
    a = (t1 - t) / (t1 - t0)
    b = (t - t0) / (t1 - t0)
    vals = m[seg] * a[:, None] + m[seg + 1] * b[:, None]
    out = np.empty((len(ts), 5), dtype=np.float64)
    out[:, 0] = ts
    out[:, 1:] = vals
    return out


def sample_uniform(curve: TrajectoryCurve, k: int) -> list[tuple[float, Box]]:
    """K samples at times uniform over the curve's domain (endpoints included)."""
    if k < 2:
        raise ParameterError(f"need at least 2 samples, got {k}")
    ts = np.linspace(curve.t_start, curve.t_end, k)
    vals = sample_curve(curve, ts)
    return [(float(v[0]), Box.from_array(v[1:])) for v in vals]


def curve_to_track(curve: TrajectoryCurve, n_frames: int) -> ObservedTrack:
    """Per-integer-frame boxes of a curve bound to an n_frames video."""
    if not curve.is_bound(n_frames):
        raise ParameterError(
            f"curve domain [{curve.t_start}, {curve.t_end}] not bound to {n_frames} frames"
        )
    vals = sample_curve(curve, np.arange(n_frames, dtype=np.float64))
    return ObservedTrack(0, tuple(Box.from_array(v[1:]) for v in vals))


# ---------------------------------------------------------------------------
# Masks and scribbles


def validate_mask(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise ParameterError(f"mask must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)) or m.min() < 0.0 or m.max() > 1.0:
        raise ParameterError("mask values must lie in [0, 1]")
    return m


def binarize(mask: np.ndarray, thresh: float = 0.5) -> np.ndarray:
    return np.asarray(mask) >= thresh


@dataclass(frozen=True)
class ScribbleMap:
    """Two disjoint binary channels over one grid: positive and negative strokes."""

    positive: np.ndarray
    negative: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positive, dtype=bool)
        neg = np.asarray(self.negative, dtype=bool)
        if pos.shape != neg.shape:
            raise ParameterError(f"channel shapes differ: {pos.shape} vs {neg.shape}")
        if np.any(pos & neg):
            raise ParameterError("positive and negative scribbles overlap")
        object.__setattr__(self, "positive", pos)
        object.__setattr__(self, "negative", neg)

    @staticmethod
    def empty(shape: tuple[int, int]) -> "ScribbleMap":
        return ScribbleMap(np.zeros(shape, dtype=bool), np.zeros(shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.positive.shape

    def is_empty(self) -> bool:
        return not (self.positive.any() or self.negative.any())

    def union(self) -> np.ndarray:
        return self.positive | self.negative


# ---------------------------------------------------------------------------
# Annotation session


@dataclass(frozen=True)
class SessionEvent:
    """One annotator action: kind, JSON-able payload, its click cost and a
    logical timestamp (append index)."""

    kind: str
    payload: dict
    clicks: int
    timestamp: int


@dataclass(frozen=True)
class AnnotationSession:
    """Full annotation state for one (video, object) pair.

    Masks, scribbles and the event log use copy-on-write updates: arrays are
    treated as immutable once stored, so sessions are cheap to snapshot.
    """

    video_id: str
    object_id: str
    n_frames: int
    curve: TrajectoryCurve
    refined_track: Optional[ObservedTrack] = None
    masks: dict = field(default_factory=dict)  # frame -> float mask (full frame)
    scribbles: dict = field(default_factory=dict)  # frame -> ScribbleMap (crop pixels)
    reference_frames: frozenset = frozenset()
    event_log: tuple = ()
    click_ledger: dict = field(default_factory=lambda: {"box_clicks": 0, "scribble_rounds": 0})

    def with_event(self, kind: str, payload: dict, clicks: int = 0, **changes) -> "AnnotationSession":
        """Session copy with an appended event, updated ledger and field changes."""
        ev = SessionEvent(kind=kind, payload=payload, clicks=clicks, timestamp=len(self.event_log))
        ledger = dict(self.click_ledger)
        if clicks:
            ledger["box_clicks"] = ledger.get("box_clicks", 0) + clicks
        if kind == "scribble":
            ledger["scribble_rounds"] = ledger.get("scribble_rounds", 0) + 1
        return replace(self, event_log=self.event_log + (ev,), click_ledger=ledger, **changes)

    def with_mask(self, frame: int, mask: np.ndarray) -> "AnnotationSession":
        masks = dict(self.masks)
        masks[frame] = mask
        return replace(self, masks=masks)

    def track_for_crops(self) -> ObservedTrack:
        """Box source for per-frame crops: refined track if present, else the curve."""
        if self.refined_track is not None:
            return self.refined_track
        return curve_to_track(self.curve, self.n_frames)
