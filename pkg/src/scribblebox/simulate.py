"""Simulated annotator: scribble synthesis from error regions, box-correction
protocols with click accounting, and the full two-stage annotation loop used
for benchmarking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    AnnotationSession,
    Box,
    ObservedTrack,
    ParameterError,
    ScribbleMap,
    TrajectoryCurve,
    binarize,
    curve_to_track,
)
from .curve_fit import (
    FitConfig,
    apply_box_correction,
    fit_curve,
    init_control_points,
    keyframes,
    refine_boxes,
    refit_suffix,
)
from .features import extract_features
from .interactive import refine_mask
from .kernels import binary_erode, label_components
from .metrics import box_iou, jf_frame
from .model import SegModel
from .propagation import propagate_masks, propagate_scribbles
from .tracker import TrackerConfig, make_template, run_track, track_step


@dataclass(frozen=True)
class SimConfig:
    iou_thresholds: tuple[float, ...] = (0.4, 0.5, 0.6, 0.7, 0.8)
    min_component_area: int = 9
    clicks_per_box_correction: int = 2
    scribble_rounds: int = 4
    keyframe_iou: float = 0.8
    lost_iou: float = 0.3

    def __post_init__(self):
        if any(not 0.0 < t < 1.0 for t in self.iou_thresholds):
            raise ParameterError("IoU thresholds must lie in (0, 1)")


def error_regions(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(false negatives, false positives) of the prediction binarized at 0.5."""
    p = binarize(pred)
    g = binarize(gt)
    if p.shape != g.shape:
        raise ParameterError("mask shapes differ")
    return g & ~p, p & ~g


def _erosion_iters(area: int) -> int:
    return max(1, int(math.floor(math.sqrt(area) / 4.0)))


def _trace_component(component: np.ndarray, iters: int) -> np.ndarray:
    """Erode the component; if it vanishes within the scheduled iterations,
    keep a single pixel of its last nonempty erosion."""
    cur = component
    for _ in range(iters):
        nxt = binary_erode(cur, 1)
        if not nxt.any():
            ys, xs = np.nonzero(cur)
            out = np.zeros_like(component)
            out[ys[0], xs[0]] = True
            return out
        cur = nxt
    return cur


def _scribble_channel(region: np.ndarray, min_area: int) -> np.ndarray:
    out = np.zeros_like(region, dtype=bool)
    labels, count = label_components(region)
    for i in range(count):
        comp = labels == i
        area = int(comp.sum())
        if area < min_area:
            continue
        out |= _trace_component(comp, _erosion_iters(area))
    return out


def simulate_area_scribble(
    pred: np.ndarray,
    gt: np.ndarray,
    cfg: SimConfig = SimConfig(),
    seed: int = 0,
) -> ScribbleMap:
    """Trace-style scribbles: erode each sufficiently large error component
    (positive from false negatives, negative from false positives)."""
    fn, fp = error_regions(pred, gt)
    return ScribbleMap(
        positive=_scribble_channel(fn, cfg.min_component_area),
        negative=_scribble_channel(fp, cfg.min_component_area),
    )


# ---------------------------------------------------------------------------
# Box-annotation protocols


@dataclass
class ProtocolResult:
    clicks: int
    track: ObservedTrack
    ious: np.ndarray
    curve: TrajectoryCurve | None = None


def _track_ious(track: ObservedTrack, gt_track: ObservedTrack) -> np.ndarray:
    return np.array(
        [box_iou(track.box_at(f), gt_track.box_at(f)) for f in track.frames]
    )


def simulate_box_baseline(
    video: np.ndarray,
    gt_track: ObservedTrack,
    tracker_cfg: TrackerConfig = TrackerConfig(),
    step_fn=track_step,
    thresholds: tuple[float, ...] = (0.4, 0.5, 0.6, 0.7, 0.8),
) -> dict[float, ProtocolResult]:
    """Watch-and-correct baseline: scan frames in order; when the tracked box
    falls below the IoU threshold, replace it with ground truth (2 clicks) and
    re-run the tracker from that frame."""
    m = len(video)
    out = {}
    for thr in thresholds:
        boxes = list(run_track(video, gt_track.box_at(0), 0, tracker_cfg, step_fn).boxes)
        clicks = 0
        f = 1
        while f < m:
            if box_iou(boxes[f], gt_track.box_at(f)) < thr:
                clicks += 2
                boxes[f] = gt_track.box_at(f)
                template = make_template(video[f], boxes[f])
                prior = boxes[f]
                for g in range(f + 1, m):
                    prior, _ = step_fn(video[g], template, prior, None, tracker_cfg)
                    boxes[g] = prior
            f += 1
        track = ObservedTrack(0, tuple(boxes))
        out[thr] = ProtocolResult(clicks=clicks, track=track, ious=_track_ious(track, gt_track))
    return out


def simulate_curve_vot(
    video: np.ndarray,
    gt_track: ObservedTrack,
    fit_cfg: FitConfig = FitConfig(),
    tracker_cfg: TrackerConfig = TrackerConfig(),
    sim_cfg: SimConfig = SimConfig(),
    step_fn=track_step,
    budget: int = 40,
    expansion: float = 25.0,
) -> ProtocolResult:
    """Keyframe-inspection protocol: fit a curve to the automatic track, then
    repeatedly correct the worst offending keyframe (ground-truth box, 2
    clicks, suffix refit) and add a control point where interpolation loses
    the object, until all keyframes pass or the click budget runs out. Ends
    with crop-constrained box refinement."""
    m = len(video)
    n_points = min(fit_cfg.n_points, m)
    track = run_track(video, gt_track.box_at(0), 0, tracker_cfg, step_fn)
    curve = fit_curve(init_control_points(track, n_points), track, fit_cfg)
    session = AnnotationSession(
        video_id="sim", object_id="0", n_frames=m, curve=curve
    )
    clicks = 0
    corrected: set[int] = set()
    changed = True
    while changed and clicks + 2 <= budget:
        changed = False
        interp = curve_to_track(session.curve, m)
        # Scan keyframes in frame order: an early correction re-tracks and
        # refits everything after it.
        failing = [
            kf
            for kf in keyframes(session.curve)
            if kf not in corrected
            and box_iou(interp.box_at(kf), gt_track.box_at(kf)) < sim_cfg.keyframe_iou
        ]
        if failing:
            kf = failing[0]
            session = apply_box_correction(session, kf, gt_track.box_at(kf))
            session = refit_suffix(session, kf, video, fit_cfg, tracker_cfg, step_fn)
            corrected.add(kf)
            clicks += 2
            changed = True
            continue
        interp = curve_to_track(session.curve, m)
        kfs = set(keyframes(session.curve))
        for f in range(m):
            if f in kfs or f in corrected:
                continue
            if box_iou(interp.box_at(f), gt_track.box_at(f)) < sim_cfg.lost_iou:
                session = apply_box_correction(session, f, gt_track.box_at(f))
                session = refit_suffix(session, f, video, fit_cfg, tracker_cfg, step_fn)
                corrected.add(f)
                clicks += 2
                changed = True
                break
    refined = refine_boxes(session.curve, video, expansion, tracker_cfg, step_fn)
    return ProtocolResult(
        clicks=clicks,
        track=refined,
        ious=_track_ious(refined, gt_track),
        curve=session.curve,
    )


def choose_worst_frame(pred_masks, gt_masks, exclude=frozenset()) -> int:
    """Frame with the lowest (J+F)/2 outside the excluded set; ties take the
    lowest index."""
    best_f = -1
    best_v = np.inf
    for f, (p, g) in enumerate(zip(pred_masks, gt_masks)):
        if f in exclude:
            continue
        v = jf_frame(p, g)
        if v < best_v:
            best_v = v
            best_f = f
    if best_f < 0:
        raise ParameterError("all frames excluded")
    return best_f


# ---------------------------------------------------------------------------
# Full two-stage annotation


@dataclass
class AnnotationRunResult:
    clicks: int
    scribble_rounds: int
    mean_iou: float
    jf_history: list[float]  # J&F after round 0 (auto) .. round k
    session: AnnotationSession


def simulate_scribble_rounds(
    video: np.ndarray,
    gt_masks: list[np.ndarray],
    session: AnnotationSession,
    model: SegModel,
    rounds: int = 4,
    n_propagate: int = 5,
    sim_cfg: SimConfig = SimConfig(),
) -> tuple[AnnotationSession, list[float]]:
    """Scribble-correction rounds on an initialized session (first-frame mask
    present and propagated): pick the worst frame, scribble its errors inside
    the crop, refine, then propagate scribbles nearby and masks onward."""
    m = session.n_frames

    def current_jf(s: AnnotationSession) -> float:
        return float(
            np.mean([jf_frame(s.masks[f], gt_masks[f]) for f in range(m)])
        )

    history = [current_jf(session)]
    for _ in range(rounds):
        preds = [session.masks[f] for f in range(m)]
        f = choose_worst_frame(preds, gt_masks, exclude=session.reference_frames)
        track = session.track_for_crops()
        grid, geo = extract_features(video[f], track.box_at(f), model.feature_cfg)
        prev_crop = geo.crop(session.masks[f])
        gt_crop = binarize(geo.crop(gt_masks[f])).astype(np.float64)
        scribbles = simulate_area_scribble(prev_crop, gt_crop, sim_cfg)
        refined_crop = refine_mask(grid, prev_crop, scribbles, model)
        session = session.with_mask(f, geo.paste(refined_crop, video[f].shape))
        session = replace(
            session,
            scribbles={**session.scribbles, f: scribbles},
            reference_frames=session.reference_frames | {f},
        )
        session = session.with_event("scribble", {"frame": f}, clicks=0)
        session = propagate_scribbles(session, model, video, f, n_propagate)
        session = propagate_masks(session, model, video, range(f + 1, m))
        history.append(current_jf(session))
    return session, history


def simulate_full_annotation(
    video: np.ndarray,
    gt_track: ObservedTrack,
    gt_masks: list[np.ndarray],
    model: SegModel,
    fit_cfg: FitConfig = FitConfig(),
    tracker_cfg: TrackerConfig = TrackerConfig(),
    sim_cfg: SimConfig = SimConfig(),
    rounds: int = 4,
    expansion: float = 25.0,
) -> AnnotationRunResult:
    """End-to-end simulated annotation: box stage (curve protocol), ground
    truth first-frame mask, mask propagation, then scribble rounds."""
    box_result = simulate_curve_vot(
        video, gt_track, fit_cfg, tracker_cfg, sim_cfg, expansion=expansion
    )
    m = len(video)
    session = AnnotationSession(
        video_id="sim",
        object_id="0",
        n_frames=m,
        curve=box_result.curve,
        refined_track=box_result.track,
        masks={0: binarize(gt_masks[0]).astype(np.float64)},
        reference_frames=frozenset({0}),
    )
    session = propagate_masks(session, model, video, range(1, m))
    session, history = simulate_scribble_rounds(
        video, gt_masks, session, model, rounds=rounds, sim_cfg=sim_cfg
    )
    return AnnotationRunResult(
        clicks=box_result.clicks,
        scribble_rounds=rounds,
        mean_iou=float(box_result.ious.mean()),
        jf_history=history,
        session=session,
    )
