from __future__ import annotations

import numpy as np
import pytest

from scribblebox.core import ScribbleMap
from scribblebox.features import FeatureConfig, features_from_crop
from scribblebox.interactive import locality_gate, refine_mask
from scribblebox.model import init_model


def brute_force_gate_region(scribbles: ScribbleMap, radius: int) -> np.ndarray:
    h, w = scribbles.shape
    region = np.zeros((h, w), dtype=bool)
    sy, sx = np.nonzero(scribbles.union())
    for y in range(h):
        for x in range(w):
            if len(sy) and np.min(np.maximum(np.abs(sy - y), np.abs(sx - x))) <= radius:
                region[y, x] = True
    return region


def random_scribbles(rng, shape, p=0.02):
    pos = rng.random(shape) < p
    neg = (rng.random(shape) < p) & ~pos
    return ScribbleMap(pos, neg)


class TestLocalityGate:
    def test_empty_scribbles_keep_prev(self, rng):
        prev = rng.random((20, 20))
        new = rng.random((20, 20))
        out = locality_gate(prev, new, ScribbleMap.empty((20, 20)), 10)
        np.testing.assert_array_equal(out, prev)

    def test_infinite_radius_passes_new(self, rng):
        prev = rng.random((20, 20))
        new = rng.random((20, 20))
        s = random_scribbles(rng, (20, 20))
        out = locality_gate(prev, new, s, np.inf)
        np.testing.assert_array_equal(out, new)

    def test_distance_arithmetic_at_radius_ten(self, rng):
        prev = rng.random((40, 40))
        new = rng.random((40, 40))
        pos = np.zeros((40, 40), bool)
        pos[20, 20] = True
        s = ScribbleMap(pos, np.zeros((40, 40), bool))
        out = locality_gate(prev, new, s, 10)
        assert out[20, 30] == new[20, 30]  # distance 10: new value
        assert out[20, 31] == prev[20, 31]  # distance 11: previous value

    def test_region_equals_brute_force_distance(self, rng):
        for _ in range(10):
            prev = rng.random((24, 24))
            new = rng.random((24, 24))
            s = random_scribbles(rng, (24, 24))
            r = int(rng.integers(1, 6))
            out = locality_gate(prev, new, s, r)
            region = brute_force_gate_region(s, r)
            np.testing.assert_array_equal(out, np.where(region, new, prev))


class TestRefineMask:
    def setup_method(self):
        self.cfg = FeatureConfig(crop_size=32, stride=8)
        self.model = init_model(self.cfg, seed=0)

    def featurize(self, rng):
        crop = rng.random((32, 32, 3))
        return features_from_crop(crop, self.cfg)

    def test_empty_scribbles_return_prev_exactly(self, rng):
        grid = self.featurize(rng)
        prev = rng.random((32, 32))
        out = refine_mask(grid, prev, ScribbleMap.empty((32, 32)), self.model)
        np.testing.assert_array_equal(out, prev)
        # idempotent under empty scribbles
        out2 = refine_mask(grid, out, ScribbleMap.empty((32, 32)), self.model)
        np.testing.assert_array_equal(out2, out)

    def test_far_pixels_bit_identical(self, rng):
        grid = self.featurize(rng)
        prev = rng.random((32, 32))
        pos = np.zeros((32, 32), bool)
        pos[4:7, 4:7] = True
        s = ScribbleMap(pos, np.zeros((32, 32), bool))
        out = refine_mask(grid, prev, s, self.model)
        far = ~brute_force_gate_region(s, self.model.gate_radius)
        np.testing.assert_array_equal(out[far], prev[far])
        assert far.any()

    def test_positive_scribble_raises_masked_pixels(self, rng):
        # warm-start head: positive scribble cells decode high
        grid = self.featurize(rng)
        prev = np.zeros((32, 32))
        pos = np.zeros((32, 32), bool)
        pos[8:16, 8:16] = True
        s = ScribbleMap(pos, np.zeros((32, 32), bool))
        out = refine_mask(grid, prev, s, self.model)
        assert (out[10:14, 10:14] >= 0.5).mean() > 0.9

    def test_negative_scribble_lowers_masked_pixels(self, rng):
        grid = self.featurize(rng)
        prev = np.ones((32, 32))
        neg = np.zeros((32, 32), bool)
        neg[8:16, 8:16] = True
        s = ScribbleMap(np.zeros((32, 32), bool), neg)
        out = refine_mask(grid, prev, s, self.model)
        assert (out[10:14, 10:14] <= 0.5).mean() > 0.9
