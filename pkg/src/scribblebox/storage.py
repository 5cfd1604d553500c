"""Load/save of frames, masks, sessions and model tensors, plus the
deterministic synthetic benchmark suite (textured background, moving
deformable blob, per-frame ground-truth boxes and masks).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import (
    AnnotationSession,
    Box,
    ObservedTrack,
    ScribbleBoxError,
    SessionEvent,
    TrajectoryCurve,
    binarize,
)
from .features import FeatureConfig, resize_bilinear
from .model import EmbedWeights, PropWeights, Readout, SegModel

SCHEMA_VERSION = 1
DATA_DIR_ENV = "SCRIBBLEBOX_DATA_DIR"


class StorageFormatError(ScribbleBoxError):
    """Malformed file content."""


class MigrationError(ScribbleBoxError):
    """Unsupported schema version."""


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


# ---------------------------------------------------------------------------
# Frames and masks


def load_frames(path) -> np.ndarray:
    """(M, H, W, 3) uint8 frames from a directory of images, in filename order."""
    p = Path(path)
    files = sorted(
        f for f in p.iterdir() if f.suffix.lower() in (".png", ".jpg", ".jpeg")
    ) if p.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no image files in {p}")
    frames = []
    shape = None
    for f in files:
        img = np.asarray(Image.open(f).convert("RGB"))
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise StorageFormatError(
                f"mixed frame dimensions: {f.name} is {img.shape[:2]}, expected {shape[:2]}"
            )
        frames.append(img)
    return np.stack(frames)


def save_mask(path, mask: np.ndarray, soft: bool = False) -> None:
    """8-bit grayscale PNG; binary by default (threshold 0.5 -> 0/255), or a
    0..255 linear encoding with --soft semantics (round half up)."""
    m = np.asarray(mask, dtype=np.float64)
    if soft:
        vals = np.floor(m * 255.0 + 0.5).astype(np.uint8)
    else:
        vals = np.where(binarize(m), 255, 0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(vals, mode="L").save(path)


def load_mask(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "L":
        raise StorageFormatError(f"mask {path} is not 8-bit grayscale (mode {img.mode})")
    return np.asarray(img, dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# Session documents


def session_document(session: AnnotationSession, mask_paths: dict | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "video_id": session.video_id,
        "object_id": session.object_id,
        "n_frames": session.n_frames,
        "curve": [
            {"t": p.t, "cx": p.box.cx, "cy": p.box.cy, "w": p.box.w, "h": p.box.h}
            for p in session.curve.points
        ],
        "reference_frames": sorted(session.reference_frames),
        "events": [
            {"kind": e.kind, "payload": e.payload, "clicks": e.clicks, "timestamp": e.timestamp}
            for e in session.event_log
        ],
        "click_ledger": dict(session.click_ledger),
        "mask_paths": {str(k): v for k, v in (mask_paths or {}).items()},
    }


def save_session(path, session: AnnotationSession, masks_dirname: str = "masks") -> None:
    """Write the session document; masks go to a sibling directory as soft
    PNGs referenced by relative path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mask_paths = {}
    for frame in sorted(session.masks):
        rel = f"{masks_dirname}/{frame:05d}.png"
        save_mask(path.parent / rel, session.masks[frame], soft=True)
        mask_paths[frame] = rel
    doc = session_document(session, mask_paths)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _field(doc: dict, name: str, kind):
    if name not in doc:
        raise StorageFormatError(f"session document missing field {name!r}")
    v = doc[name]
    if not isinstance(v, kind):
        raise StorageFormatError(f"session field {name!r} has type {type(v).__name__}")
    return v


def load_session(path, load_masks: bool = True) -> AnnotationSession:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise StorageFormatError(f"unparseable session document {path}: {e}") from e
    version = _field(doc, "schema_version", int)
    if version != SCHEMA_VERSION:
        raise MigrationError(f"schema version {version} unsupported (expected {SCHEMA_VERSION})")
    try:
        curve = TrajectoryCurve.from_matrix(
            np.array([[p["t"], p["cx"], p["cy"], p["w"], p["h"]] for p in _field(doc, "curve", list)])
        )
    except (KeyError, TypeError) as e:
        raise StorageFormatError(f"bad curve entry in {path}: {e}") from e
    events = tuple(
        SessionEvent(
            kind=_field(e, "kind", str),
            payload=_field(e, "payload", dict),
            clicks=_field(e, "clicks", int),
            timestamp=_field(e, "timestamp", int),
        )
        for e in _field(doc, "events", list)
    )
    masks = {}
    if load_masks:
        for k, rel in _field(doc, "mask_paths", dict).items():
            masks[int(k)] = load_mask(path.parent / rel)
    return AnnotationSession(
        video_id=_field(doc, "video_id", str),
        object_id=_field(doc, "object_id", str),
        n_frames=_field(doc, "n_frames", int),
        curve=curve,
        masks=masks,
        reference_frames=frozenset(_field(doc, "reference_frames", list)),
        event_log=events,
        click_ledger=_field(doc, "click_ledger", dict),
    )


# ---------------------------------------------------------------------------
# Named-tensor model container


def _tensor_payload(tensors: dict[str, np.ndarray]) -> dict:
    return {
        name: {"shape": list(t.shape), "data": [float(v) for v in np.ravel(t)]}
        for name, t in sorted(tensors.items())
    }


def _checksum(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def save_model(path, model: SegModel) -> None:
    payload = _tensor_payload(model.to_tensors())
    doc = {
        "format": "scribblebox-tensors",
        "version": 1,
        "config": {
            **asdict(model.feature_cfg),
            "gate_radius": model.gate_radius,
            "d_embed": model.dim_embed,
        },
        "tensors": payload,
        "checksum": _checksum(payload),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_model(path) -> SegModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "scribblebox-tensors" or doc.get("version") != 1:
        raise StorageFormatError(f"{path} is not a version-1 model container")
    if _checksum(doc["tensors"]) != doc["checksum"]:
        raise StorageFormatError(f"model container {path} failed its checksum")
    tensors = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["tensors"].items()
    }
    cfg_doc = dict(doc["config"])
    gate_radius = cfg_doc.pop("gate_radius")
    cfg_doc.pop("d_embed")
    cfg = FeatureConfig(**cfg_doc)
    return SegModel(
        feature_cfg=cfg,
        prop=PropWeights(w0=tensors["prop.w0"], w1=tensors["prop.w1"]),
        prop_readout=Readout(w=tensors["prop_readout.w"], b=float(tensors["prop_readout.b"][0])),
        embed=EmbedWeights(e=tensors["embed.e"]),
        reducer_w=tensors["reducer.w"],
        reducer_b=tensors["reducer.b"],
        inter_w=tensors["inter.w"],
        inter_b=float(tensors["inter.b"][0]),
        gate_radius=gate_radius,
    )


# ---------------------------------------------------------------------------
# Synthetic benchmark suite


@dataclass(frozen=True)
class SuiteConfig:
    n_clips: int = 24
    n_frames: int = 60
    height: int = 240
    width: int = 320
    min_radius: float = 26.0
    max_radius: float = 38.0
    max_curvature: float = 10.0
    deform_amplitude: float = 0.12
    deform_drift: float = 0.05  # radians/frame of boundary-phase drift
    spot_orbit: float = 0.02  # radians/frame of texture-spot orbit
    scale_range: tuple[float, float] = (0.88, 1.14)
    dash_prob: float = 0.8  # chance of a fast travel phase between two dwells
    dash_frames: tuple[int, int] = (5, 7)
    min_dash_dist: float = 210.0  # fast enough to outrun a 25 px search margin


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int, lo: float, hi: float) -> np.ndarray:
    coarse = rng.uniform(lo, hi, size=(cells, cells, 3))
    return resize_bilinear(coarse, h, w)


def render_clip(seed, cfg: SuiteConfig = SuiteConfig()):
    """One synthetic clip: (frames uint8 (M,H,W,3), masks bool (M,H,W), boxes).

    The object is a radial blob with slowly-drifting harmonic deformation and
    a linear scale ramp, moving along piecewise-linear waypoints with optional
    quadratic curvature, over a static textured background.
    """
    rng = np.random.default_rng(seed)
    h, w, m = cfg.height, cfg.width, cfg.n_frames
    # Background texture stays inside a narrow band around a base color so the
    # object color remains separable anywhere in the frame.
    bg_base = rng.uniform(0.25, 0.65, 3)
    bg = np.clip(
        bg_base + _smooth_noise(rng, h, w, 8, -0.09, 0.09) + rng.normal(0, 0.015, (h, w, 3)),
        0,
        1,
    )
    color = np.clip(bg_base + rng.choice([-1, 1], 3) * rng.uniform(0.33, 0.45, 3), 0.05, 0.95)

    r0 = rng.uniform(cfg.min_radius, cfg.max_radius)
    r0 = min(r0, 0.2 * min(h, w))  # keep small frames usable
    s0, s1 = rng.uniform(*cfg.scale_range, size=2)
    margin = min(r0 * max(s0, s1) * (1 + cfg.deform_amplitude) + 6, min(h, w) / 2 - 2)

    # Motion: slow dwell phases, optionally bridged by a fast dash whose
    # per-frame travel exceeds a typical tracker search margin.
    if m >= 20 and rng.random() < cfg.dash_prob:
        dash_len = int(rng.integers(*cfg.dash_frames))
        t1 = int(rng.integers(int(0.25 * m), int(0.55 * m)))
        t2 = t1 + dash_len
        for _ in range(64):
            a = np.array([rng.uniform(margin, w - margin), rng.uniform(margin, h - margin)])
            b = np.array([rng.uniform(margin, w - margin), rng.uniform(margin, h - margin)])
            if np.linalg.norm(b - a) >= cfg.min_dash_dist:
                break
        drift1 = rng.uniform(-12, 12, 2)
        drift2 = rng.uniform(-12, 12, 2)
        way_t = np.array([0.0, float(t1), float(t2), float(m - 1)])
        way_xy = np.stack([a, a + drift1, b, b + drift2])
        n_way = 4
    else:
        n_way = int(rng.integers(2, 4))
        way_t = np.linspace(0, m - 1, n_way)
        way_xy = np.stack(
            [rng.uniform(margin, w - margin, n_way), rng.uniform(margin, h - margin, n_way)],
            axis=1,
        )
    way_xy[:, 0] = np.clip(way_xy[:, 0], margin, w - margin)
    way_xy[:, 1] = np.clip(way_xy[:, 1], margin, h - margin)
    curve_amp = rng.uniform(0, cfg.max_curvature, size=max(n_way - 1, 1))
    amps = rng.uniform(0.4, 1.0, 2) * cfg.deform_amplitude
    phases = rng.uniform(0, 2 * np.pi, 2)
    omegas = rng.uniform(-1.0, 1.0, 2) * cfg.deform_drift
    # Internal texture keeps ZNCC locked on; amplitudes stay mild so object
    # cells never drift into the background color band.
    spot = rng.uniform(-0.32, -0.18, size=(2, 1))
    spot_r = rng.uniform(0.2, 0.55, 2)
    spot_phi = rng.uniform(0, 2 * np.pi, 2)
    spot_omega = rng.uniform(-1.0, 1.0, 2) * cfg.spot_orbit

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = np.empty((m, h, w, 3), dtype=np.uint8)
    masks = np.empty((m, h, w), dtype=bool)
    boxes = []
    for f in range(m):
        u = f / max(m - 1, 1)
        seg = min(int(np.searchsorted(way_t, f, side="right")) - 1, n_way - 2)
        t0, t1 = way_t[seg], way_t[seg + 1]
        lam = (f - t0) / (t1 - t0) if t1 > t0 else 0.0
        cx, cy = way_xy[seg] * (1 - lam) + way_xy[seg + 1] * lam
        cy = cy + curve_amp[seg] * 4.0 * lam * (1 - lam)
        scale = s0 * (1 - u) + s1 * u
        dx = xs - cx
        dy = ys - cy
        r = np.hypot(dx, dy)
        th = np.arctan2(dy, dx)
        boundary = r0 * scale * (
            1.0
            + amps[0] * np.cos(2 * th + phases[0] + omegas[0] * f)
            + amps[1] * np.cos(3 * th + phases[1] + omegas[1] * f)
        )
        mask = r <= boundary
        alpha = np.clip((boundary - r) / 1.5 + 0.5, 0.0, 1.0)
        shade = 1.0 - 0.12 * (r / np.maximum(boundary, 1e-9)) ** 2
        tex = np.ones((h, w))
        for k in range(2):
            ang = spot_phi[k] + spot_omega[k] * f
            sx = cx + spot_r[k] * r0 * scale * np.cos(ang)
            sy = cy + spot_r[k] * r0 * scale * np.sin(ang)
            d2 = ((xs - sx) ** 2 + (ys - sy) ** 2) / (0.35 * r0 * scale) ** 2
            tex += spot[k, 0] * np.exp(-d2)
        obj = np.clip(color[None, None, :] * (shade * tex)[:, :, None], 0, 1)
        frame = bg * (1 - alpha[:, :, None]) + obj * alpha[:, :, None]
        frames[f] = np.clip(frame * 255.0, 0, 255).astype(np.uint8)
        masks[f] = mask
        rows = np.nonzero(mask.any(axis=1))[0]
        cols = np.nonzero(mask.any(axis=0))[0]
        boxes.append(
            Box.from_corners(cols[0], rows[0], cols[-1] + 1.0, rows[-1] + 1.0)
        )
    return frames, masks, boxes


def generate_suite(out_dir, seed: int = 42, cfg: SuiteConfig = SuiteConfig()) -> Path:
    """Write the synthetic suite to disk; byte-identical for a fixed seed."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    clip_ids = []
    for i in range(cfg.n_clips):
        clip_id = f"clip_{i:03d}"
        clip_ids.append(clip_id)
        frames, masks, boxes = render_clip([seed, i], cfg)
        cdir = root / clip_id
        (cdir / "frames").mkdir(parents=True, exist_ok=True)
        (cdir / "masks").mkdir(parents=True, exist_ok=True)
        for f in range(len(frames)):
            Image.fromarray(frames[f]).save(cdir / "frames" / f"{f:05d}.png")
            save_mask(cdir / "masks" / f"{f:05d}.png", masks[f].astype(np.float64))
        gt = {
            "video_id": clip_id,
            "n_frames": len(frames),
            "boxes": [[b.cx, b.cy, b.w, b.h] for b in boxes],
        }
        (cdir / "gt.json").write_text(json.dumps(gt, indent=1, sort_keys=True))
    manifest = {"seed": seed, "config": asdict(cfg), "clips": clip_ids}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_suite_clip(clip_dir):
    """(frames, gt_masks, gt_track) for one generated clip."""
    cdir = Path(clip_dir)
    frames = load_frames(cdir / "frames")
    gt = json.loads((cdir / "gt.json").read_text())
    masks = [load_mask(cdir / "masks" / f"{f:05d}.png") for f in range(gt["n_frames"])]
    track = ObservedTrack(0, tuple(Box(*b) for b in gt["boxes"]))
    return frames, masks, track


def list_suite_clips(suite_dir) -> list[Path]:
    root = Path(suite_dir)
    manifest = root / "manifest.json"
    if manifest.exists():
        ids = json.loads(manifest.read_text())["clips"]
        return [root / c for c in ids]
    return sorted(p for p in root.iterdir() if p.is_dir())
