import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roadaff.trajectory import (
    AngularSpeedSeries, DegenerateTimestepError, Pose, RouteMismatchError, Trajectory, TrajectoryError,
    estimate_angular_speed, read_series, read_trajectories, synchronize, wrap_angle, write_series,
    write_trajectories,
)


def arc_run(run_id="r", radius=10.0, speed=2.0, dt=0.1, n=50, x0=0.0):
    """Constant-rate left turn: angular speed = speed / radius."""
    w = speed / radius
    t = np.arange(n) * dt
    th = w * t
    return Trajectory.from_arrays(run_id, t, x0 + radius * np.sin(th), radius * (1 - np.cos(th)), th)


def straight_run(run_id="s", n=20, step=1.0, dt=0.5, heading=0.0):
    t = np.arange(n) * dt
    d = np.arange(n) * step
    return Trajectory.from_arrays(run_id, t, d * math.cos(heading), d * math.sin(heading), np.full(n, heading))


def test_heading_is_wrapped():
    p = Pose(0, 0, 3 * math.pi / 2, 0)
    assert p.heading == pytest.approx(-math.pi / 2)
    assert Pose(0, 0, -math.pi, 0).heading == pytest.approx(math.pi)


@given(st.floats(-50, 50, allow_nan=False))
def test_wrap_angle_range(a):
    w = float(wrap_angle(a))
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


def test_trajectory_invariants():
    with pytest.raises(TrajectoryError):
        Trajectory("a", (Pose(0, 0, 0, 0),))
    with pytest.raises(DegenerateTimestepError):
        Trajectory.from_arrays("a", [0, 1, 1], [0, 1, 2], [0, 0, 0], [0, 0, 0])
    with pytest.raises(TrajectoryError):
        Trajectory.from_arrays("a", [0, 1, 2], [0, 1, 1], [0, 0, 0], [0, 0, 0])


def test_straight_drive_has_zero_angular_speed():
    s = estimate_angular_speed(straight_run())
    assert np.all(s.values == 0)
    assert len(s) == 19


def test_constant_turn_rate_recovered():
    tr = arc_run(radius=10.0, speed=2.0)
    s = estimate_angular_speed(tr)
    assert np.allclose(s.values, 0.2, atol=1e-9)
    # samples sit at arc midpoints
    arc = tr.arc_length()
    assert np.allclose(s.arc_positions, 0.5 * (arc[1:] + arc[:-1]))


def test_heading_crossing_pi_is_small_rotation():
    th = np.array([math.pi - 0.01, -math.pi + 0.01])
    tr = Trajectory.from_arrays("a", [0, 1], [0, -1], [0, 0], th)
    assert estimate_angular_speed(tr).values[0] == pytest.approx(0.02)


def test_synchronize_identical_runs_equal_single_run():
    a = arc_run("a")
    s = synchronize([a, arc_run("b")], grid_spacing=0.25)
    assert s.n_runs == 2
    assert np.allclose(s.per_run_values[0], s.per_run_values[1])
    assert np.allclose(s.values, 0.2)
    assert s.arc_positions[0] == 0 and np.all(np.diff(s.arc_positions) == 0.25)


def test_synchronize_median_is_robust():
    runs = [arc_run(str(i)) for i in range(4)]
    s_mean = synchronize(runs, statistic="mean")
    s_med = synchronize(runs, statistic="median")
    assert np.allclose(s_mean.values, s_med.values)
    with pytest.raises(ValueError):
        synchronize(runs, statistic="mode")


def test_synchronize_rejects_mismatched_routes():
    with pytest.raises(RouteMismatchError):
        synchronize([straight_run("a", n=20), straight_run("b", n=40)])
    far = Trajectory.from_arrays("c", np.arange(20) * 0.5, np.arange(20) + 100.0, np.zeros(20), np.zeros(20))
    with pytest.raises(RouteMismatchError):
        synchronize([straight_run("a"), far], endpoint_radius=5.0)


def test_synchronize_rescales_run_length():
    # a run 10 % longer is mapped proportionally onto the reference route
    a = straight_run("a", n=21, step=1.0)
    b = straight_run("b", n=21, step=1.1)
    s = synchronize([a, b], grid_spacing=1.0)
    assert s.arc_positions[-1] == pytest.approx(20.0)


def test_series_invariants():
    with pytest.raises(ValueError):
        AngularSpeedSeries(np.array([0.0, 0.0]), np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        AngularSpeedSeries(np.array([0.0, 1.0]), np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        AngularSpeedSeries(np.array([0.0, 1.0]), np.array([1.0, 2.0]), np.zeros((2, 3)))


def test_trajectory_file_round_trip(tmp_path):
    runs = [arc_run("a"), straight_run("b")]
    write_trajectories(tmp_path / "d.csv", runs)
    back = read_trajectories(tmp_path / "d.csv")
    assert [r.run_id for r in back] == ["a", "b"]
    assert np.array_equal(back[0].xy, runs[0].xy)
    assert np.array_equal(back[1].headings, runs[1].headings)


def test_reader_reports_non_monotone_timestamp(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("run_id,t,x,y,heading\na,0,0,0,0\na,1,1,0,0\na,0.5,2,0,0\n")
    with pytest.raises(DegenerateTimestepError, match=r":4:"):
        read_trajectories(p)


def test_reader_rejects_garbage(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("run_id,t,x,y,heading\na,0,zero,0,0\n")
    with pytest.raises(TrajectoryError, match=r":2:"):
        read_trajectories(p)


def test_series_file_round_trip(tmp_path):
    s = synchronize([arc_run("a")])
    write_series(tmp_path / "s.csv", s)
    back = read_series(tmp_path / "s.csv")
    assert np.array_equal(back.values, s.values)
    assert np.array_equal(back.arc_positions, s.arc_positions)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.1, 3.0), min_size=2, max_size=30), st.floats(-1.0, 1.0))
def test_arc_length_monotone_and_sum(steps, heading):
    d = np.concatenate([[0.0], np.cumsum(steps)])
    tr = Trajectory.from_arrays("p", np.arange(d.size), d * math.cos(heading), d * math.sin(heading),
                                np.full(d.size, heading))
    arc = tr.arc_length()
    assert arc[0] == 0 and np.all(np.diff(arc) > 0)
    assert arc[-1] == pytest.approx(sum(steps))
