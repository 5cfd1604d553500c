from __future__ import annotations

import numpy as np
import pytest

from scribblebox.core import Box, ObservedTrack, TrajectoryCurve


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_bound_curve(rng, n_frames: int, n_points: int, jitter: float = 0.3) -> TrajectoryCurve:
    """Random curve bound to [0, n_frames-1] with jittered interior times."""
    ts = np.linspace(0, n_frames - 1, n_points)
    if n_points > 2:
        ts[1:-1] += rng.uniform(-jitter, jitter, n_points - 2) * (n_frames - 1) / (n_points - 1)
    mat = np.stack(
        [
            ts,
            rng.uniform(40, 280, n_points),
            rng.uniform(40, 200, n_points),
            rng.uniform(20, 60, n_points),
            rng.uniform(20, 60, n_points),
        ],
        axis=1,
    )
    return TrajectoryCurve.from_matrix(mat)


def random_track(rng, n_frames: int, start: int = 0) -> ObservedTrack:
    boxes = tuple(
        Box(rng.uniform(30, 200), rng.uniform(30, 150), rng.uniform(10, 50), rng.uniform(10, 50))
        for _ in range(n_frames)
    )
    return ObservedTrack(start=start, boxes=boxes)


def moving_rect_video(n_frames=20, h=120, w=160, dx=3.0, dy=0.0, seed=0):
    """Textured rectangle translating over a noisy background, with gt boxes."""
    rng = np.random.default_rng(seed)
    bg = rng.uniform(0.0, 0.3, (h, w, 3))
    pattern = rng.uniform(0.5, 1.0, (30, 24, 3))
    video = np.empty((n_frames, h, w, 3))
    gt = []
    for f in range(n_frames):
        img = bg.copy()
        x0 = int(round(20 + dx * f))
        y0 = int(round(40 + dy * f))
        img[y0 : y0 + 30, x0 : x0 + 24] = pattern
        video[f] = img
        gt.append(Box(x0 + 12.0, y0 + 15.0, 24.0, 30.0))
    return (video * 255).astype(np.uint8), gt
