import numpy as np
import pytest

from evflow import SensorGeometry
from evflow.mocomp import bilinear_sample
from evflow.simulate import (
    MotionModel,
    ScenePattern,
    checkerboard_corners,
    generate_events,
    ground_truth_flow,
    ground_truth_trajectory,
    vertical_bars,
)

GEO = SensorGeometry(32, 24)


def single_point(x, y, geo=GEO, sign=1):
    return ScenePattern(np.array([[x, y]], float), np.array([sign], np.int8), geo)


class TestGenerateEvents:
    def test_known_constant_velocity_sequence(self):
        w = generate_events(single_point(10, 10), MotionModel.constant(10, 0),
                            duration=1.0, rate=1.0)
        assert len(w) == 11
        assert np.array_equal(w.x, np.arange(10, 21, dtype=float))
        assert np.array_equal(w.y, np.full(11, 10.0))
        assert np.array_equal(w.t, np.arange(11) * 100_000)
        assert np.all(w.p == 1)

    def test_zero_velocity_single_event_per_point(self):
        pat = checkerboard_corners(GEO, pitch=6)
        w = generate_events(pat, MotionModel.constant(0, 0), duration=1.0, rate=5.0)
        assert len(w) == len(pat)
        assert np.all(w.t == 0)

    def test_arc_displacement_is_rotation(self):
        # Quarter turn about the frame center in 1 s.
        cx, cy = 16.0, 12.0
        motion = MotionModel.arc(cx, cy, np.pi / 2)
        x0, y0 = 20.0, 12.0
        px, py = motion.pos(x0, y0, 1.0)
        rx, ry = x0 - cx, y0 - cy
        want = (cx + 0 * rx - 1 * ry, cy + 1 * rx + 0 * ry)  # 90 deg rotation
        assert px == pytest.approx(want[0], abs=1e-12)
        assert py == pytest.approx(want[1], abs=1e-12)

    def test_merged_stream_sorted_and_in_bounds(self):
        pat = checkerboard_corners(GEO, pitch=4)
        w = generate_events(pat, MotionModel.arc(16, 12, 3.0), duration=0.2, rate=2.0)
        assert len(w) > 0
        assert (np.diff(w.t) >= 0).all()
        assert w.x.min() >= 0 and w.x.max() <= GEO.width - 1
        assert w.y.min() >= 0 and w.y.max() <= GEO.height - 1

    def test_displacement_tracks_velocity_within_rounding(self):
        w = generate_events(single_point(3, 4), MotionModel.constant(25, 13),
                            duration=0.5, rate=4.0)
        t = w.t * 1e-6
        assert np.abs(w.x - (3 + 25 * t)).max() <= 0.5
        assert np.abs(w.y - (4 + 13 * t)).max() <= 0.5

    def test_point_leaving_frame_stops_emitting(self):
        w = generate_events(single_point(28, 10), MotionModel.constant(100, 0),
                            duration=1.0, rate=2.0)
        assert w.x.max() <= GEO.width - 1
        # 3.5 px of headroom at 100 px/s: nothing after ~35 ms.
        assert w.t.max() <= 40_000

    def test_fractional_positions(self):
        w = generate_events(single_point(5, 5), MotionModel.constant(3, 0),
                            duration=1.0, rate=7.0, fractional=True)
        frac = w.x - np.floor(w.x)
        assert (frac > 0).any()

    def test_noise_reproducible_and_bounded(self):
        pat = single_point(16, 12)
        a = generate_events(pat, MotionModel.constant(10, 0), 0.5, 1.0,
                            noise_rate=0.05, seed=42)
        b = generate_events(pat, MotionModel.constant(10, 0), 0.5, 1.0,
                            noise_rate=0.05, seed=42)
        assert len(a) > 6  # noise added on top of the 6 signal events
        assert np.array_equal(a.t, b.t)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.p, b.p)
        assert (np.diff(a.t) >= 0).all()

    def test_empty_pattern_rejected(self):
        pat = ScenePattern(np.zeros((0, 2)), np.zeros(0, np.int8), GEO)
        with pytest.raises(ValueError):
            generate_events(pat, MotionModel.constant(1, 0), 1.0, 1.0)

    def test_out_of_bounds_start_rejected(self):
        with pytest.raises(ValueError):
            single_point(40, 10)


class TestGroundTruthFlow:
    def test_constant_velocity_uniform(self):
        f = ground_truth_flow(MotionModel.constant(10, 0), 0.0, 0.5, GEO)
        assert np.all(f.u == 5.0)
        assert np.all(f.v == 0.0)
        assert f.duration == 0.5
        assert f.valid.all()

    def test_arc_magnitude_is_chord_length(self):
        omega, dt = 1.7, 0.3
        f = ground_truth_flow(MotionModel.arc(16, 12, omega), 0.2, 0.2 + dt, GEO)
        ys, xs = np.mgrid[0:GEO.height, 0:GEO.width]
        r = np.hypot(xs - 16.0, ys - 12.0)
        chord = 2.0 * r * np.sin(omega * dt / 2.0)
        np.testing.assert_allclose(f.magnitude, chord, atol=1e-9)

    def test_vanishing_interval_gives_vanishing_flow(self):
        f = ground_truth_flow(MotionModel.arc(16, 12, 2.0), 0.0, 1e-6, GEO)
        assert f.magnitude.max() < 1e-4

    def test_interval_must_be_positive(self):
        with pytest.raises(ValueError):
            ground_truth_flow(MotionModel.constant(1, 0), 0.5, 0.5, GEO)


class TestGroundTruthTrajectory:
    def test_constant_velocity_collinear(self):
        pos = ground_truth_trajectory(MotionModel.constant(8, 4),
                                      [[2.0, 3.0]], [0.0, 0.5, 1.0])
        p = pos[0]
        assert np.allclose(p[1] - p[0], p[2] - p[1], atol=1e-12)
        assert np.allclose(p[1] - p[0], [4.0, 2.0], atol=1e-12)

    def test_arc_constant_radius(self):
        pos = ground_truth_trajectory(MotionModel.arc(16, 12, 2.5),
                                      [[20.0, 12.0], [10.0, 8.0]],
                                      np.linspace(0, 1, 9))
        r = np.hypot(pos[..., 0] - 16.0, pos[..., 1] - 12.0)
        assert np.abs(r - r[:, :1]).max() < 1e-12

    def test_chained_flows_reproduce_trajectory(self):
        # Rotation flow is affine in position, so bilinear sampling of the
        # flow rasters is exact and the chain must match the analytic path.
        motion = MotionModel.arc(16.0, 12.0, 0.8)
        times = np.linspace(0.0, 0.5, 6)
        seed = np.array([10.3, 12.7])
        want = ground_truth_trajectory(motion, [seed], times)[0]
        p = seed.copy()
        for k in range(len(times) - 1):
            f = ground_truth_flow(motion, times[k], times[k + 1], GEO)
            p = p + np.array([bilinear_sample(f.u, p[0], p[1]),
                              bilinear_sample(f.v, p[0], p[1])])
            np.testing.assert_allclose(p, want[k + 1], atol=1e-9)

    def test_times_must_ascend(self):
        with pytest.raises(ValueError):
            ground_truth_trajectory(MotionModel.constant(1, 0), [[0, 0]], [0.5, 0.2])


class TestPatterns:
    def test_checkerboard_within_bounds_and_mixed_signs(self):
        pat = checkerboard_corners(GEO, pitch=5, margin=2)
        assert len(pat) > 4
        assert set(np.unique(pat.signs)) == {-1, 1}

    def test_vertical_bars_columns(self):
        pat = vertical_bars(GEO, xs=[4, 9])
        assert set(np.unique(pat.points[:, 0])) == {4.0, 9.0}
