import math

import numpy as np
import pytest

from s2cd.lowlevel_control import (
    BRAKE_FLOOR,
    IdmParams,
    LATERAL_GAINS,
    PidGains,
    PidState,
    build_lane_path,
    fit_cubic_spline,
    idm_accel,
    pid_step,
    plan_lane_change,
    spline_slope,
    spline_value,
)


def natural_spline_second_derivs(xs, ys):
    """Independent oracle: solve the full dense natural-spline system."""
    n = len(xs)
    A = np.zeros((n, n))
    rhs = np.zeros(n)
    A[0, 0] = 1.0
    A[-1, -1] = 1.0
    for i in range(1, n - 1):
        h0 = xs[i] - xs[i - 1]
        h1 = xs[i + 1] - xs[i]
        A[i, i - 1] = h0
        A[i, i] = 2.0 * (h0 + h1)
        A[i, i + 1] = h1
        rhs[i] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0)
    return np.linalg.solve(A, rhs)


class TestCubicSpline:
    def test_two_points_is_linear(self):
        segs = fit_cubic_spline([(0.0, 0.0), (1.0, 1.0)])
        assert len(segs) == 1
        assert segs[0].a == 0.0
        assert segs[0].b == pytest.approx(1.0, abs=1e-15)
        assert segs[0].c == pytest.approx(0.0, abs=1e-15)
        assert segs[0].d == pytest.approx(0.0, abs=1e-15)

    def test_collinear_points_stay_linear(self):
        segs = fit_cubic_spline([(0.0, 0.0), (1.0, 2.0), (2.0, 4.0)])
        for seg in segs:
            assert abs(seg.c) < 1e-12
            assert abs(seg.d) < 1e-12
            assert seg.b == pytest.approx(2.0, abs=1e-12)

    def test_random_knots_match_dense_solve_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            xs = np.cumsum(rng.uniform(0.5, 2.0, size=6))
            ys = rng.uniform(-3.0, 3.0, size=6)
            segs = fit_cubic_spline(list(zip(xs, ys)))
            m_oracle = natural_spline_second_derivs(xs, ys)
            # knot interpolation is exact: a_i = y_i
            for seg, y in zip(segs, ys[:-1]):
                assert seg.a == y
            assert spline_value(segs, float(xs[-1])) == pytest.approx(ys[-1], abs=1e-9)
            # second derivative at each left knot is 2*c_i
            for seg, m in zip(segs, m_oracle[:-1]):
                assert 2.0 * seg.c == pytest.approx(m, abs=1e-9)
            # C1/C2 continuity at interior junctions
            for left, right in zip(segs, segs[1:]):
                x = right.x_i
                assert left.value(x) == pytest.approx(right.value(x), abs=1e-9)
                assert left.slope(x) == pytest.approx(right.slope(x), abs=1e-9)
                h = x - left.x_i
                left_second = 2.0 * left.c + 6.0 * left.d * h
                assert left_second == pytest.approx(2.0 * right.c, abs=1e-9)

    def test_rejects_descending_or_duplicate_x(self):
        with pytest.raises(ValueError):
            fit_cubic_spline([(0.0, 0.0), (0.0, 1.0)])
        with pytest.raises(ValueError):
            fit_cubic_spline([(1.0, 0.0), (0.5, 1.0)])
        with pytest.raises(ValueError):
            fit_cubic_spline([(0.0, 0.0)])


class TestIdm:
    def test_free_flow_equilibrium_at_desired_speed(self):
        acc = idm_accel(25.0, 25.0, math.inf)
        assert abs(acc) < 1e-9

    def test_standstill_far_leader_value(self):
        # a * (1 - 0 - (s0/gap)^2) with table constants
        acc = idm_accel(0.0, 0.0, 100.0)
        assert acc == pytest.approx(2.0 * (1.0 - (2.0 / 100.0) ** 2), abs=1e-12)
        assert acc == pytest.approx(1.9992, abs=1e-9)

    def test_equal_speeds_at_desired_gap_brakes(self):
        # gap equals s0 + v*T so the interaction term contributes exactly -a
        v = 20.0
        gap = 2.0 + v * 0.6
        acc = idm_accel(v, v, gap)
        assert acc == pytest.approx(2.0 * (1.0 - (v / 25.0) ** 4 - 1.0), abs=1e-12)
        assert acc < 0

    def test_tiny_gap_braking_is_floored(self):
        acc = idm_accel(20.0, 0.0, 0.5)
        assert acc == BRAKE_FLOOR

    def test_never_exceeds_max_acceleration(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            v = rng.uniform(0.0, 25.0)
            vl = rng.uniform(0.0, 25.0)
            gap = rng.uniform(0.5, 200.0)
            acc = idm_accel(v, vl, gap)
            assert BRAKE_FLOOR <= acc <= 2.0 + 1e-12

    def test_rejects_nonpositive_gap(self):
        with pytest.raises(ValueError):
            idm_accel(10.0, 10.0, 0.0)
        with pytest.raises(ValueError):
            idm_accel(10.0, 10.0, -2.0)


class TestPid:
    def test_zero_error_history_gives_zero(self):
        state = PidState()
        assert pid_step(LATERAL_GAINS, 0.0, state, 0.05) == 0.0

    def test_first_step_closed_form(self):
        gains = PidGains(kp=0.75, kd=0.01, ki=0.2)
        e, dt = 1.3, 0.05
        out = pid_step(gains, e, PidState(), dt)
        assert out == pytest.approx(gains.kp * e + gains.ki * e * dt + gains.kd * e / dt, abs=1e-12)

    def test_integral_clamp(self):
        gains = PidGains(kp=0.0, kd=0.0, ki=1.0, integral_clamp=0.5)
        state = PidState()
        for _ in range(100):
            out = pid_step(gains, 10.0, state, 0.1)
        assert out == pytest.approx(0.5, abs=1e-12)

    def test_converges_on_first_order_lag_plant(self):
        # independent plant: y' = (K*u - y)/tau, driven toward setpoint 1.0
        dt, gain, tau = 0.05, 10.0, 0.4
        y, state = 0.0, PidState()
        setpoint = 1.0
        for _ in range(200):
            e = setpoint - y
            u = pid_step(LATERAL_GAINS, e, state, dt)
            y += dt * (gain * u - y) / tau
            assert abs(y) < 100.0  # no divergence
        assert abs(setpoint - y) < 0.02


class TestPlanLaneChange:
    def test_end_waypoint_on_target_centerline(self):
        pts = plan_lane_change(x=40.0, y=5.625, current_lane=1, target_lane=2,
                               lane_width=3.75, lanes_count=3)
        assert pts[-1] == (50.0, pytest.approx(2.5 * 3.75))
        assert pts[0] == (40.0, 5.625)

    def test_same_lane_degenerates_to_straight_segment(self):
        pts = plan_lane_change(10.0, 1.875, 0, 0, 3.75, 3)
        assert len(pts) == 2
        assert pts[0][1] == pts[1][1] == 1.875

    def test_rejects_nonadjacent_or_missing_lane(self):
        with pytest.raises(ValueError):
            plan_lane_change(0.0, 1.875, 0, 2, 3.75, 3)
        with pytest.raises(ValueError):
            plan_lane_change(0.0, 1.875, 2, 3, 3.75, 3)

    def test_path_slope_bounded(self):
        pts = plan_lane_change(0.0, 1.875, 0, 1, 3.75, 3)
        path = build_lane_path(pts)
        xs = np.linspace(0.0, 10.0, 400)
        slopes = [abs(path.slope(float(x))) for x in xs]
        assert max(slopes) < 0.8

    def test_path_value_clamps_beyond_span(self):
        pts = plan_lane_change(0.0, 1.875, 1, 0, 3.75, 3)
        path = build_lane_path(pts)
        assert path.value(25.0) == pytest.approx(0.5 * 3.75)
        assert path.value(-5.0) == pytest.approx(1.875)
        assert path.slope(25.0) == 0.0
