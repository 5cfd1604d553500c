from __future__ import annotations

import numpy as np
import pytest

from scribblebox.core import Box, ParameterError
from scribblebox.metrics import box_iou
from scribblebox.tracker import (
    TrackerConfig,
    TrackerTemplate,
    clamp_box_into,
    make_template,
    run_track,
    track_step,
)

from conftest import moving_rect_video


class TestTemplate:
    def test_patch_matches_rounded_box(self, rng):
        frame = (rng.random((50, 60, 3)) * 255).astype(np.uint8)
        tmpl = make_template(frame, Box(30, 25, 10, 14))
        assert tmpl.patch.shape == (14, 10)


class TestTrackStep:
    def test_static_video_returns_prior(self):
        video, gt = moving_rect_video(n_frames=2, dx=0.0)
        tmpl = make_template(video[0], gt[0])
        out, conf = track_step(video[1], tmpl, gt[0], None)
        assert out == gt[0]
        assert conf > 0.95

    def test_translation_recovered(self):
        # oracle: exhaustive correlation scan = the kernel itself on the full
        # search region; here the known shift is the ground truth
        video, gt = moving_rect_video(n_frames=2, dx=3.0)
        tmpl = make_template(video[0], gt[0])
        out, conf = track_step(video[1], tmpl, gt[0], None)
        assert out.cx == pytest.approx(gt[1].cx, abs=1.0)
        assert out.cy == pytest.approx(gt[1].cy, abs=1.0)

    def test_window_excluding_object_scores_lower(self):
        video, gt = moving_rect_video(n_frames=2, dx=0.0)
        tmpl = make_template(video[0], gt[0])
        _, conf_free = track_step(video[1], tmpl, gt[0], None)
        far = Box(130.0, 100.0, 30.0, 30.0)  # object-free corner
        _, conf_blocked = track_step(video[1], tmpl, far, Box(130, 100, 28, 28))
        assert conf_blocked < conf_free

    def test_degenerate_window_returns_prior_conf_zero(self):
        video, gt = moving_rect_video(n_frames=1)
        tmpl = make_template(video[0], gt[0])
        outside = Box(-50.0, -50.0, 10.0, 10.0)
        out, conf = track_step(video[0], tmpl, gt[0], outside)
        assert out == gt[0]
        assert conf == 0.0

    def test_output_size_is_template_times_scale(self):
        video, gt = moving_rect_video(n_frames=2, dx=2.0)
        cfg = TrackerConfig()
        tmpl = make_template(video[0], gt[0])
        out, _ = track_step(video[1], tmpl, gt[0], None, cfg)
        ratios = (out.w / tmpl.source_box.w, out.h / tmpl.source_box.h)
        assert ratios[0] in cfg.scale_set and ratios[1] in cfg.scale_set

    def test_deterministic(self):
        video, gt = moving_rect_video(n_frames=2, dx=3.0)
        tmpl = make_template(video[0], gt[0])
        a = track_step(video[1], tmpl, gt[0], None)
        b = track_step(video[1], tmpl, gt[0], None)
        assert a == b


class TestRunTrack:
    def test_single_frame(self):
        video, gt = moving_rect_video(n_frames=1)
        track = run_track(video, gt[0], 0)
        assert len(track) == 1 and track.box_at(0) == gt[0]

    def test_static_video_identical_boxes(self):
        video, gt = moving_rect_video(n_frames=10, dx=0.0)
        track = run_track(video, gt[0], 0)
        assert all(b == gt[0] for b in track.boxes)

    def test_moving_rectangle_iou(self):
        video, gt = moving_rect_video(n_frames=30, dx=3.0)
        track = run_track(video, gt[0], 0)
        ious = [box_iou(track.box_at(f), gt[f]) for f in range(30)]
        assert min(ious) >= 0.7

    def test_empty_video_rejected(self):
        with pytest.raises(ParameterError):
            run_track(np.empty((0, 10, 10, 3), np.uint8), Box(5, 5, 2, 2), 0)

    def test_output_intersects_search_window(self):
        video, gt = moving_rect_video(n_frames=12, dx=4.0)
        cfg = TrackerConfig()
        track = run_track(video, gt[0], 0, cfg)
        for f in range(1, 12):
            prior = track.boxes[f - 1]
            search = prior.expand(cfg.search_margin)
            assert box_iou(clamp_box_into(track.boxes[f], search), track.boxes[f]) > 0


class TestClampBoxInto:
    def test_inside_unchanged(self):
        w = Box(50, 50, 100, 100)
        b = Box(40, 60, 10, 10)
        assert clamp_box_into(b, w) == b

    def test_shifted_inside(self):
        w = Box(50, 50, 100, 100)
        b = Box(120, 50, 10, 10)
        out = clamp_box_into(b, w)
        assert out.cx == pytest.approx(95.0)
        x0, y0, x1, y1 = out.corners()
        assert x0 >= 0 and x1 <= 100
