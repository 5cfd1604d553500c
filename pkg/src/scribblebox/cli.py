"""Command-line entry points: fit, train, bench, serve, suite."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .core import Box, ObservedTrack
from .curve_fit import FitConfig, fit_curve, init_control_points, match_cost
from .features import FeatureConfig
from .model import init_model
from .simulate import (
    SimConfig,
    simulate_box_baseline,
    simulate_curve_vot,
    simulate_full_annotation,
)
from .storage import (
    SuiteConfig,
    default_data_dir,
    generate_suite,
    list_suite_clips,
    load_model,
    load_suite_clip,
    save_model,
)
from .training import SynthConfig, TrainConfig, make_training_clips, train_toy

ADDR_ENV = "SCRIBBLEBOX_ADDR"


def _load_track(path: str) -> ObservedTrack:
    doc = json.loads(Path(path).read_text())
    boxes = tuple(Box(*b) for b in doc["boxes"])
    return ObservedTrack(start=int(doc.get("start", 0)), boxes=boxes)


def cmd_fit(args) -> int:
    track = _load_track(args.track)
    cfg = FitConfig(n_points=args.n, k_samples=args.k, steps=args.steps, lr=args.lr)
    curve = fit_curve(init_control_points(track, cfg.n_points), track, cfg)
    out = {
        "cost": match_cost(curve, track, cfg.k_samples),
        "points": [
            {"t": p.t, "cx": p.box.cx, "cy": p.box.cy, "w": p.box.w, "h": p.box.h}
            for p in curve.points
        ],
    }
    Path(args.out).write_text(json.dumps(out, indent=2))
    print(f"fit {len(curve.points)} control points, cost {out['cost']:.3f} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    feature_cfg = FeatureConfig(crop_size=args.crop_size, stride=args.stride)
    model = init_model(feature_cfg, seed=args.seed)
    clips = make_training_clips(args.clips, seed=args.seed, cfg=SynthConfig(feature=feature_cfg))
    cfg = TrainConfig(stage1_steps=args.steps, stage2_steps=args.steps)
    model, history = train_toy(model, clips, cfg)
    save_model(args.out, model)
    s1, s2 = history["stage1"], history["stage2"]
    print(
        f"trained on {len(clips)} clips: stage1 {s1[0]:.4f} -> {s1[-1]:.4f}, "
        f"stage2 {s2[0]:.4f} -> {s2[-1]:.4f}; saved {args.out}"
    )
    return 0


def cmd_bench(args) -> int:
    suite = Path(args.suite)
    model = load_model(args.model) if args.model else init_model(FeatureConfig(crop_size=96, stride=4))
    rows = []
    for clip_dir in list_suite_clips(suite):
        frames, gt_masks, gt_track = load_suite_clip(clip_dir)
        video_id = clip_dir.name
        if args.protocol == "baseline":
            results = simulate_box_baseline(frames, gt_track, thresholds=(args.threshold,))
            r = results[args.threshold]
            rows.append(
                dict(video=video_id, object="0", protocol="baseline", clicks=r.clicks,
                     scribble_rounds=0, mean_iou=float(r.ious.mean()), j="", f="", jf="")
            )
        elif args.protocol == "curve":
            r = simulate_curve_vot(frames, gt_track)
            rows.append(
                dict(video=video_id, object="0", protocol="curve", clicks=r.clicks,
                     scribble_rounds=0, mean_iou=float(r.ious.mean()), j="", f="", jf="")
            )
        else:
            from .metrics import boundary_f, region_jaccard

            r = simulate_full_annotation(frames, gt_track, gt_masks, model)
            m = len(frames)
            preds = [r.session.masks[f] for f in range(m)]
            j = float(np.mean([region_jaccard(p, g) for p, g in zip(preds, gt_masks)]))
            f = float(np.mean([boundary_f(p, g) for p, g in zip(preds, gt_masks)]))
            rows.append(
                dict(video=video_id, object="0", protocol="full", clicks=r.clicks,
                     scribble_rounds=r.scribble_rounds, mean_iou=r.mean_iou,
                     j=j, f=f, jf=r.jf_history[-1])
            )
        print(f"{video_id}: {rows[-1]}")
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["video", "object", "protocol", "clicks", "scribble_rounds",
                            "mean_iou", "j", "f", "jf"]
        )
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    model = load_model(args.model) if args.model else None
    addr = os.environ.get(ADDR_ENV, args.addr)
    host, _, port = addr.partition(":")
    app = create_app(data_dir=args.data_dir, model=model)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 7860))
    return 0


def cmd_suite(args) -> int:
    cfg = SuiteConfig(n_clips=args.clips, n_frames=args.frames)
    root = generate_suite(args.out, seed=args.seed, cfg=cfg)
    print(f"generated {cfg.n_clips} clips x {cfg.n_frames} frames at {root}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="scribblebox", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a trajectory curve to a box track")
    p.add_argument("--track", required=True, help="JSON file with {start, boxes: [[cx,cy,w,h],...]}")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--k", type=int, default=300)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("train", help="toy-train the propagation/interaction model")
    p.add_argument("--clips", type=int, default=64)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop-size", type=int, default=96)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("bench", help="run simulated-annotator benchmarks")
    p.add_argument("--suite", default=str(default_data_dir()))
    p.add_argument("--protocol", choices=("baseline", "curve", "full"), default="full")
    p.add_argument("--threshold", type=float, default=0.6)
    p.add_argument("--model", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("serve", help="serve the annotation HTTP API")
    p.add_argument("--addr", default="127.0.0.1:7860")
    p.add_argument("--data-dir", default=str(default_data_dir()))
    p.add_argument("--model", default=None)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("suite", help="generate the synthetic benchmark suite")
    p.add_argument("--out", default=str(default_data_dir()))
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--clips", type=int, default=24)
    p.add_argument("--frames", type=int, default=60)
    p.set_defaults(fn=cmd_suite)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
