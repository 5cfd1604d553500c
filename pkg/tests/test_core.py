from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scribblebox.core import (
    Box,
    ControlPoint,
    ObservedTrack,
    OutOfRangeError,
    ParameterError,
    ScribbleMap,
    TrajectoryCurve,
    curve_to_track,
    interpolate,
    sample_curve,
    sample_uniform,
)

from conftest import random_bound_curve


def curve_of(rows):
    return TrajectoryCurve.from_matrix(np.array(rows, dtype=np.float64))


class TestBox:
    def test_rejects_nonpositive_size(self):
        with pytest.raises(ParameterError):
            Box(0, 0, 0, 10)
        with pytest.raises(ParameterError):
            Box(0, 0, 10, -1)

    def test_rejects_nonfinite(self):
        with pytest.raises(ParameterError):
            Box(np.nan, 0, 10, 10)

    def test_corner_round_trip(self):
        b = Box(5.0, 7.0, 4.0, 6.0)
        assert Box.from_corners(*b.corners()) == b


class TestCurveInvariants:
    def test_needs_two_points(self):
        with pytest.raises(ParameterError):
            TrajectoryCurve((ControlPoint(0.0, Box(0, 0, 1, 1)),))

    def test_rejects_small_gap(self):
        with pytest.raises(ParameterError):
            curve_of([[0, 0, 0, 10, 10], [0.4, 1, 1, 10, 10]])

    def test_gap_of_half_frame_allowed(self):
        curve_of([[0, 0, 0, 10, 10], [0.5, 1, 1, 10, 10]])


class TestInterpolate:
    def test_midpoint_of_linear_segment(self):
        c = curve_of([[0, 0, 0, 10, 10], [10, 10, 0, 10, 10]])
        assert interpolate(c, 5.0) == Box(5, 0, 10, 10)

    def test_left_endpoint_equals_first_point(self):
        c = curve_of([[0, 0, 0, 10, 10], [10, 10, 0, 10, 10]])
        assert interpolate(c, 0.0) == Box(0, 0, 10, 10)

    def test_constant_curve(self):
        c = curve_of([[0, 3, 4, 10, 10], [4, 3, 4, 10, 10], [9, 3, 4, 10, 10]])
        assert interpolate(c, 7.0) == Box(3, 4, 10, 10)

    def test_out_of_range_raises(self):
        c = curve_of([[0, 0, 0, 10, 10], [10, 10, 0, 10, 10]])
        with pytest.raises(OutOfRangeError):
            interpolate(c, 10.5)
        with pytest.raises(OutOfRangeError):
            interpolate(c, -0.5)

    def test_exact_at_every_control_point(self, rng):
        c = random_bound_curve(rng, 50, 7)
        for p in c.points:
            got = interpolate(c, p.t)
            np.testing.assert_allclose(got.as_array(), p.box.as_array(), atol=1e-12)

    @given(a=st.floats(0.01, 0.45), b=st.floats(0.55, 0.99))
    @settings(max_examples=40, deadline=None)
    def test_piecewise_linearity(self, a, b):
        # midpoint value equals the average of endpoint values within a segment
        c = curve_of([[0, 2, 3, 12, 9], [10, 8, -5, 4, 20]])
        ta, tb = 10 * a, 10 * b
        mid = interpolate(c, (ta + tb) / 2).as_array()
        avg = (interpolate(c, ta).as_array() + interpolate(c, tb).as_array()) / 2
        np.testing.assert_allclose(mid, avg, atol=1e-9)


class TestSampleUniform:
    def test_two_samples_are_endpoints(self, rng):
        c = random_bound_curve(rng, 30, 5)
        samples = sample_uniform(c, 2)
        assert samples[0][0] == c.t_start and samples[1][0] == c.t_end
        np.testing.assert_allclose(samples[0][1].as_array(), c.points[0].box.as_array())
        np.testing.assert_allclose(samples[1][1].as_array(), c.points[-1].box.as_array())

    def test_default_sample_count(self, rng):
        c = random_bound_curve(rng, 60, 10)
        assert len(sample_uniform(c, 300)) == 300

    def test_three_samples_hit_midpoint_of_linear_curve(self):
        c = curve_of([[0, 0, 0, 10, 10], [10, 10, 20, 10, 30]])
        mid = sample_uniform(c, 3)[1]
        assert mid[0] == 5.0
        np.testing.assert_allclose(mid[1].as_array(), [5, 10, 10, 20])

    def test_constant_curve_yields_identical_boxes(self):
        c = curve_of([[0, 3, 4, 10, 10], [9, 3, 4, 10, 10]])
        boxes = [b.as_array() for _, b in sample_uniform(c, 17)]
        for b in boxes:
            np.testing.assert_allclose(b, boxes[0])

    def test_rejects_k_below_two(self, rng):
        with pytest.raises(ParameterError):
            sample_uniform(random_bound_curve(rng, 10, 2), 1)


class TestCurveToTrack:
    def test_constant_curve(self):
        c = curve_of([[0, 3, 4, 10, 10], [4, 3, 4, 10, 10]])
        track = curve_to_track(c, 5)
        assert len(track) == 5
        for f in track.frames:
            assert track.box_at(f) == Box(3, 4, 10, 10)

    def test_linear_curve_position_equals_frame(self):
        c = curve_of([[0, 0, 5, 10, 10], [9, 9, 5, 10, 10]])
        track = curve_to_track(c, 10)
        for f in range(10):
            assert track.box_at(f).cx == pytest.approx(f)

    def test_matches_per_frame_interpolation_oracle(self, rng):
        c = random_bound_curve(rng, 40, 6)
        track = curve_to_track(c, 40)
        for f in range(40):
            expected = interpolate(c, float(f)).as_array()
            np.testing.assert_allclose(track.box_at(f).as_array(), expected, atol=1e-12)

    def test_unbound_curve_rejected(self):
        c = curve_of([[1, 0, 0, 10, 10], [9, 9, 9, 10, 10]])
        with pytest.raises(ParameterError):
            curve_to_track(c, 10)


class TestObservedTrack:
    def test_nonempty_required(self):
        with pytest.raises(ParameterError):
            ObservedTrack(0, ())

    def test_sample_at_interpolates_between_frames(self, rng):
        from conftest import random_track

        track = random_track(rng, 10)
        mid = track.sample_at(np.array([3.5]))[0]
        expected = (track.box_at(3).as_array() + track.box_at(4).as_array()) / 2
        np.testing.assert_allclose(mid[1:], expected)
        assert mid[0] == 3.5


class TestScribbleMap:
    def test_rejects_overlap(self):
        a = np.zeros((4, 4), bool)
        a[1, 1] = True
        with pytest.raises(ParameterError):
            ScribbleMap(a, a)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ParameterError):
            ScribbleMap(np.zeros((4, 4), bool), np.zeros((4, 5), bool))

    def test_empty(self):
        s = ScribbleMap.empty((4, 4))
        assert s.is_empty()
