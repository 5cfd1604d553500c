from __future__ import annotations

import numpy as np
import pytest

from scribblebox.core import Box, ParameterError
from scribblebox.metrics import (
    boundary_f,
    box_iou,
    default_boundary_tol,
    jf,
    jf_frame,
    mask_boundary,
    region_jaccard,
)


def brute_force_jaccard(pred, gt):
    inter = union = 0
    for y in range(pred.shape[0]):
        for x in range(pred.shape[1]):
            p, g = bool(pred[y, x]), bool(gt[y, x])
            inter += p and g
            union += p or g
    return 1.0 if union == 0 else inter / union


def brute_force_boundary(mask):
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not mask[yy, xx]:
                    out[y, x] = True
                    break
    return out


def brute_force_boundary_f(pred, gt, tol):
    pb = brute_force_boundary(pred.astype(bool))
    gb = brute_force_boundary(gt.astype(bool))
    n_p, n_g = pb.sum(), gb.sum()
    if n_p == 0 and n_g == 0:
        return 1.0

    def matches(a, b):
        """Pixels of a within Chebyshev distance tol of any pixel of b."""
        hits = 0
        by, bx = np.nonzero(b)
        for y, x in zip(*np.nonzero(a)):
            if len(by) and np.min(np.maximum(np.abs(by - y), np.abs(bx - x))) <= tol:
                hits += 1
        return hits

    precision = matches(pb, gb) / n_p if n_p else 0.0
    recall = matches(gb, pb) / n_g if n_g else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


class TestBoxIou:
    def test_identical(self):
        b = Box(5, 5, 10, 10)
        assert box_iou(b, b) == 1.0

    def test_disjoint(self):
        assert box_iou(Box(0, 0, 4, 4), Box(100, 0, 4, 4)) == 0.0

    def test_half_overlap_analytic(self):
        assert box_iou(Box(5, 5, 10, 10), Box(10, 5, 10, 10)) == pytest.approx(1 / 3)

    def test_symmetry_and_translation_invariance(self, rng):
        for _ in range(25):
            a = Box(*rng.uniform(5, 50, 2), *rng.uniform(5, 30, 2))
            b = Box(*rng.uniform(5, 50, 2), *rng.uniform(5, 30, 2))
            assert box_iou(a, b) == pytest.approx(box_iou(b, a))
            dx, dy = rng.uniform(-20, 20, 2)
            a2 = Box(a.cx + dx, a.cy + dy, a.w, a.h)
            b2 = Box(b.cx + dx, b.cy + dy, b.w, b.h)
            assert box_iou(a2, b2) == pytest.approx(box_iou(a, b), abs=1e-9)

    def test_one_iff_identical(self, rng):
        a = Box(10, 10, 8, 6)
        b = Box(10.5, 10, 8, 6)
        assert box_iou(a, b) < 1.0


class TestRegionJaccard:
    def test_equal_nonempty(self):
        m = np.zeros((8, 8))
        m[2:5, 3:6] = 1
        assert region_jaccard(m, m) == 1.0

    def test_both_empty_is_one(self):
        z = np.zeros((5, 5))
        assert region_jaccard(z, z) == 1.0

    def test_matches_pixel_count_oracle(self, rng):
        for _ in range(30):
            pred = rng.random((12, 12)) > 0.6
            gt = rng.random((12, 12)) > 0.6
            assert region_jaccard(pred, gt) == pytest.approx(brute_force_jaccard(pred, gt), abs=1e-9)

    def test_symmetric(self, rng):
        pred = rng.random((10, 10)) > 0.5
        gt = rng.random((10, 10)) > 0.5
        assert region_jaccard(pred, gt) == region_jaccard(gt, pred)


class TestBoundaryF:
    def test_equal_masks(self):
        m = np.zeros((16, 16))
        m[4:10, 5:12] = 1
        assert boundary_f(m, m) == 1.0

    def test_disjoint_distant(self):
        a = np.zeros((32, 32))
        b = np.zeros((32, 32))
        a[2:5, 2:5] = 1
        b[25:29, 25:29] = 1
        assert boundary_f(a, b, tol=1) == 0.0

    def test_boundary_includes_image_border(self):
        m = np.ones((6, 6))
        b = mask_boundary(m)
        assert b[0].all() and b[-1].all() and b[:, 0].all() and b[:, -1].all()
        assert not b[2:4, 2:4].any()

    def test_matches_brute_force_on_random_masks(self, rng):
        for _ in range(20):
            pred = rng.random((16, 16)) > 0.7
            gt = rng.random((16, 16)) > 0.7
            for tol in (1, 2):
                got = boundary_f(pred, gt, tol=tol)
                want = brute_force_boundary_f(pred, gt, tol)
                assert got == pytest.approx(want, abs=1e-9)

    def test_shifted_square_analytic(self):
        a = np.zeros((32, 32))
        b = np.zeros((32, 32))
        a[10:20, 10:20] = 1
        b[12:22, 10:20] = 1  # shifted by 2 rows
        got = boundary_f(a, b, tol=2)
        want = brute_force_boundary_f(a.astype(bool), b.astype(bool), 2)
        assert got == pytest.approx(want, abs=1e-9)

    def test_infinite_tol_nonempty_masks(self):
        a = np.zeros((16, 16))
        b = np.zeros((16, 16))
        a[2:4, 2:4] = 1
        b[10:14, 10:14] = 1
        assert boundary_f(a, b, tol=np.inf) == 1.0

    def test_default_tol_formula(self):
        assert default_boundary_tol((240, 320)) == round(0.008 * np.hypot(240, 320))
        assert default_boundary_tol((10, 10)) == 1  # floor of 1


class TestJf:
    def test_all_perfect(self):
        m = np.zeros((8, 8))
        m[2:6, 2:6] = 1
        assert jf([m, m, m], [m, m, m]) == 1.0

    def test_one_bad_frame_among_three(self):
        good = np.zeros((16, 16))
        good[4:10, 4:10] = 1
        bad = np.zeros((16, 16))
        bad[12:15, 12:15] = 1
        # bad vs good: J=0 and F=0 -> (0+0)/2; two perfect frames -> 1 each
        assert jf([good, good, bad], [good, good, good], tol=1) == pytest.approx(2 / 3)

    def test_matches_per_frame_loop_oracle(self, rng):
        preds = [rng.random((12, 12)) > 0.6 for _ in range(5)]
        gts = [rng.random((12, 12)) > 0.6 for _ in range(5)]
        want = np.mean([jf_frame(p, g) for p, g in zip(preds, gts)])
        assert jf(preds, gts) == pytest.approx(want)

    def test_length_mismatch(self):
        m = np.zeros((4, 4))
        with pytest.raises(ParameterError):
            jf([m], [m, m])
