"""Session-oriented HTTP API for the annotation workflow.

Sessions are event-sourced: every mutation is an event appended to the
session log, handlers are deterministic, and undo truncates the log and
replays it from the creation request. Mutations on one session are serialized
behind a per-session lock; distinct sessions proceed independently.
"""

from __future__ import annotations

import base64
import io
import json
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from PIL import Image
from pydantic import BaseModel

from .core import (
    AnnotationSession,
    Box,
    ControlPoint,
    ParameterError,
    RejectedEditError,
    ScribbleBoxError,
    ScribbleMap,
)
from .curve_fit import (
    CurveEdit,
    FitConfig,
    apply_box_correction,
    apply_edit,
    fit_curve,
    init_control_points,
    keyframes,
    refine_boxes,
    refit_suffix,
)
from .features import extract_features
from .interactive import refine_mask
from .metrics import boundary_f, jf, region_jaccard
from .model import SegModel, init_model
from .propagation import propagate_masks, propagate_scribbles
from .storage import load_frames, load_mask, session_document
from .tracker import TrackerConfig, run_track


# ---------------------------------------------------------------------------
# Wire helpers


def rle_encode(mask: np.ndarray) -> list[list[int]]:
    """Row spans [row, start, length] of a binary mask."""
    m = np.asarray(mask, dtype=bool)
    rows = []
    for y in range(m.shape[0]):
        xs = np.flatnonzero(m[y])
        if len(xs) == 0:
            continue
        breaks = np.flatnonzero(np.diff(xs) > 1)
        start = 0
        for b in list(breaks) + [len(xs) - 1]:
            rows.append([int(y), int(xs[start]), int(xs[b] - xs[start] + 1)])
            start = b + 1
    return rows


def rle_decode(rows: list, shape: tuple[int, int]) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    for y, x0, length in rows:
        if not (0 <= y < shape[0] and 0 <= x0 and x0 + length <= shape[1]):
            raise ParameterError(f"RLE span out of bounds: {[y, x0, length]}")
        m[y, x0 : x0 + length] = True
    return m


def scribbles_from_payload(payload: dict) -> ScribbleMap:
    shape = tuple(payload["shape"])
    pos = rle_decode(payload.get("positive", []), shape)
    neg = rle_decode(payload.get("negative", []), shape)
    return ScribbleMap(pos & ~neg, neg)


def _box_from_payload(d: dict) -> Box:
    return Box(float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"]))


def _png_bytes(array: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Service state


@dataclass
class SessionRecord:
    session_id: str
    creation: dict
    state: AnnotationSession
    lock: threading.Lock = field(default_factory=threading.Lock)


@dataclass
class ServiceState:
    data_dir: Path
    model: SegModel
    fit_cfg: FitConfig = field(default_factory=FitConfig)
    tracker_cfg: TrackerConfig = field(default_factory=TrackerConfig)
    expansion: float = 25.0
    sessions: dict = field(default_factory=dict)
    videos: dict = field(default_factory=dict)
    counter: int = 0
    registry_lock: threading.Lock = field(default_factory=threading.Lock)

    def video(self, video_id: str) -> np.ndarray:
        if video_id not in self.videos:
            frames_dir = self.data_dir / video_id / "frames"
            try:
                self.videos[video_id] = load_frames(frames_dir)
            except FileNotFoundError as e:
                raise HTTPException(status_code=404, detail=f"unknown video {video_id!r}") from e
        return self.videos[video_id]

    def gt_masks(self, video_id: str):
        mask_dir = self.data_dir / video_id / "masks"
        if not mask_dir.is_dir():
            return None
        files = sorted(mask_dir.glob("*.png"))
        return [load_mask(f) for f in files] if files else None


def _create_session(state: ServiceState, creation: dict) -> AnnotationSession:
    video = state.video(creation["video_id"])
    m = len(video)
    if m < 2:
        raise HTTPException(status_code=422, detail="video must have at least 2 frames")
    box = _box_from_payload(creation["first_box"])
    h, w = video[0].shape[:2]
    x0, y0, x1, y1 = box.corners()
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise HTTPException(status_code=422, detail="first box outside the image")
    track = run_track(video, box, 0, state.tracker_cfg)
    n_points = min(state.fit_cfg.n_points, m)
    curve = fit_curve(
        init_control_points(track, n_points), track, state.fit_cfg
    )
    session = AnnotationSession(
        video_id=creation["video_id"],
        object_id=creation["object_id"],
        n_frames=m,
        curve=curve,
    )
    first_mask = creation.get("first_mask")
    if first_mask is not None:
        mask = rle_decode(first_mask["rows"], (h, w)).astype(np.float64)
        session = replace(
            session,
            masks={0: mask},
            reference_frames=frozenset({0}),
        )
    return session


def _apply_event(state: ServiceState, session: AnnotationSession, kind: str, payload: dict) -> AnnotationSession:
    video = state.video(session.video_id)
    if kind == "curve_edit":
        point = None
        if "point" in payload:
            p = payload["point"]
            point = ControlPoint(float(p["t"]), _box_from_payload(p))
        edit = CurveEdit(kind=payload["kind"], index=int(payload.get("index", -1)), new_point=point)
        return apply_edit(session, edit)
    if kind == "box_correction":
        frame = int(payload["frame"])
        if not 0 <= frame < session.n_frames:
            raise ParameterError(f"frame {frame} out of range")
        session = apply_box_correction(session, frame, _box_from_payload(payload["box"]))
        return refit_suffix(session, frame, video, state.fit_cfg, state.tracker_cfg)
    if kind == "refine_boxes":
        refined = refine_boxes(session.curve, video, state.expansion, state.tracker_cfg)
        return session.with_event("refine_boxes", payload, refined_track=refined)
    if kind == "init_mask":
        frame = int(payload["frame"])
        h, w = video[0].shape[:2]
        mask = rle_decode(payload["rle"]["rows"], (h, w)).astype(np.float64)
        session = session.with_mask(frame, mask)
        return session.with_event(
            "init_mask",
            payload,
            reference_frames=session.reference_frames | {frame},
        )
    if kind == "scribble":
        frame = int(payload["frame"])
        if frame not in session.masks:
            raise ConflictError(f"frame {frame} has no mask to refine yet")
        scribbles = scribbles_from_payload(payload["rle"])
        track = session.track_for_crops()
        grid, geo = extract_features(video[frame], track.box_at(frame), state.model.feature_cfg)
        size = state.model.feature_cfg.crop_size
        if scribbles.shape != (size, size):
            raise ParameterError(f"scribbles must be {size}x{size} (crop resolution)")
        prev_crop = geo.crop(session.masks[frame])
        refined = refine_mask(grid, prev_crop, scribbles, state.model)
        session = session.with_mask(frame, geo.paste(refined, video[frame].shape))
        scribs = dict(session.scribbles)
        scribs[frame] = scribbles
        return session.with_event(
            "scribble",
            payload,
            scribbles=scribs,
            reference_frames=session.reference_frames | {frame},
        )
    if kind == "propagate_masks":
        targets = payload.get("targets")
        rng = range(session.n_frames) if targets is None else [int(t) for t in targets]
        session = propagate_masks(session, state.model, video, rng)
        return session.with_event("propagate_masks", payload)
    if kind == "propagate_scribbles":
        frame = int(payload["frame"])
        n = int(payload.get("n", 5))
        session = propagate_scribbles(session, state.model, video, frame, n)
        return session.with_event("propagate_scribbles", payload)
    raise ParameterError(f"unknown event kind {kind!r}")


class ConflictError(ScribbleBoxError):
    """Event invalid for the session's current state."""


def _replay(state: ServiceState, record: SessionRecord, events) -> AnnotationSession:
    session = _create_session(state, record.creation)
    for ev in events:
        session = _apply_event(state, session, ev.kind, ev.payload)
    return session


def _session_view(record: SessionRecord) -> dict:
    s = record.state
    return {
        "session_id": record.session_id,
        "video_id": s.video_id,
        "object_id": s.object_id,
        "n_frames": s.n_frames,
        "curve": [
            {"t": p.t, "cx": p.box.cx, "cy": p.box.cy, "w": p.box.w, "h": p.box.h}
            for p in s.curve.points
        ],
        "keyframes": keyframes(s.curve),
        "reference_frames": sorted(s.reference_frames),
        "mask_frames": sorted(s.masks),
        "click_ledger": dict(s.click_ledger),
        "n_events": len(s.event_log),
        "refined": s.refined_track is not None,
    }


def _export_archive(state: ServiceState, record: SessionRecord) -> dict:
    s = record.state
    masks = {}
    for frame in sorted(s.masks):
        arr = np.floor(np.asarray(s.masks[frame]) * 255.0 + 0.5).astype(np.uint8)
        masks[str(frame)] = base64.b64encode(_png_bytes(arr, "L")).decode("ascii")
    doc = session_document(s, {f: f"masks/{f:05d}.png" for f in sorted(s.masks)})
    archive = {"session": doc, "masks": masks}
    gt = state.gt_masks(s.video_id)
    if gt is not None and s.masks:
        frames = [f for f in sorted(s.masks) if f < len(gt)]
        preds = [s.masks[f] for f in frames]
        gts = [gt[f] for f in frames]
        archive["metrics"] = {
            "frames_evaluated": frames,
            "j": float(np.mean([region_jaccard(p, g) for p, g in zip(preds, gts)])),
            "f": float(np.mean([boundary_f(p, g) for p, g in zip(preds, gts)])),
            "jf": jf(preds, gts),
        }
    return archive


# ---------------------------------------------------------------------------
# App


class CreateSessionRequest(BaseModel):
    video_id: str
    object_id: str = "0"
    first_box: dict
    first_mask: dict | None = None


class EventRequest(BaseModel):
    kind: str
    payload: dict = {}


def create_app(
    data_dir=None,
    model: SegModel | None = None,
    fit_cfg: FitConfig | None = None,
    tracker_cfg: TrackerConfig | None = None,
) -> FastAPI:
    from .storage import default_data_dir

    state = ServiceState(
        data_dir=Path(data_dir) if data_dir is not None else default_data_dir(),
        model=model if model is not None else init_model(),
        fit_cfg=fit_cfg or FitConfig(),
        tracker_cfg=tracker_cfg or TrackerConfig(),
    )
    app = FastAPI(title="scribblebox")
    app.state.service = state

    def _record(session_id: str) -> SessionRecord:
        rec = state.sessions.get(session_id)
        if rec is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        return rec

    @app.post("/sessions")
    def create_session(req: CreateSessionRequest):
        creation = req.model_dump()
        try:
            session = _create_session(state, creation)
        except (ParameterError, RejectedEditError) as e:
            raise HTTPException(status_code=422, detail=str(e)) from e
        with state.registry_lock:
            state.counter += 1
            session_id = f"s{state.counter:05d}"
            record = SessionRecord(session_id=session_id, creation=creation, state=session)
            state.sessions[session_id] = record
        return _session_view(record)

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return _session_view(_record(session_id))

    @app.post("/sessions/{session_id}/events")
    def post_event(session_id: str, req: EventRequest):
        record = _record(session_id)
        with record.lock:
            if req.kind == "undo":
                events = record.state.event_log
                if not events:
                    raise HTTPException(status_code=409, detail="nothing to undo")
                try:
                    record.state = _replay(state, record, events[:-1])
                except ScribbleBoxError as e:
                    raise HTTPException(status_code=409, detail=str(e)) from e
                return _session_view(record)
            try:
                record.state = _apply_event(state, record.state, req.kind, req.payload)
            except ConflictError as e:
                raise HTTPException(status_code=409, detail=str(e)) from e
            except RejectedEditError as e:
                raise HTTPException(status_code=409, detail=str(e)) from e
            except (ParameterError, KeyError, TypeError, ValueError) as e:
                raise HTTPException(status_code=422, detail=str(e)) from e
        return _session_view(record)

    @app.get("/sessions/{session_id}/frames/{frame}")
    def get_frame(session_id: str, frame: int):
        record = _record(session_id)
        video = state.video(record.state.video_id)
        if not 0 <= frame < len(video):
            raise HTTPException(status_code=404, detail="frame out of range")
        return Response(content=_png_bytes(video[frame], "RGB"), media_type="image/png")

    @app.get("/sessions/{session_id}/masks/{frame}")
    def get_mask(session_id: str, frame: int):
        record = _record(session_id)
        mask = record.state.masks.get(frame)
        if mask is None:
            raise HTTPException(status_code=404, detail="no mask for this frame")
        arr = np.floor(np.asarray(mask) * 255.0 + 0.5).astype(np.uint8)
        return Response(content=_png_bytes(arr, "L"), media_type="image/png")

    @app.get("/sessions/{session_id}/export")
    def export_session(session_id: str):
        record = _record(session_id)
        archive = _export_archive(state, record)
        return Response(
            content=json.dumps(archive, sort_keys=True, separators=(",", ":")),
            media_type="application/json",
        )

    return app
