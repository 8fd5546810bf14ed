"""Multi-run trajectory ingestion and statistical angular-speed series.

Runs are aligned spatially: every run's angular-speed samples are placed on
its own arc length, rescaled onto the arc length of the first (reference)
run, and linearly interpolated onto a common grid.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class TrajectoryError(ValueError):
    pass


class DegenerateTimestepError(TrajectoryError):
    pass


class RouteMismatchError(TrajectoryError):
    pass


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float
    timestamp: float

    def __post_init__(self):
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))


@dataclass(frozen=True)
class Trajectory:
    run_id: str
    poses: tuple[Pose, ...]

    def __post_init__(self):
        poses = tuple(self.poses)
        object.__setattr__(self, "poses", poses)
        if len(poses) < 2:
            raise TrajectoryError(f"run {self.run_id}: need at least 2 poses, got {len(poses)}")
        t = np.array([p.timestamp for p in poses])
        bad = np.flatnonzero(np.diff(t) <= 0)
        if bad.size:
            i = int(bad[0])
            raise DegenerateTimestepError(
                f"run {self.run_id}: timestamps not strictly increasing at pose {i + 1} "
                f"({t[i]} -> {t[i + 1]})")
        xy = self.xy
        step = np.hypot(*np.diff(xy, axis=0).T)
        bad = np.flatnonzero(step <= 0)
        if bad.size:
            raise TrajectoryError(f"run {self.run_id}: zero spacing between poses {bad[0]} and {bad[0] + 1}")

    @classmethod
    def from_arrays(cls, run_id, t, x, y, heading) -> "Trajectory":
        return cls(str(run_id), tuple(Pose(float(a), float(b), float(c), float(d))
                                      for a, b, c, d in zip(x, y, heading, t)))

    def __len__(self):
        return len(self.poses)

    @property
    def xy(self) -> np.ndarray:
        return np.array([(p.x, p.y) for p in self.poses], dtype=float)

    @property
    def headings(self) -> np.ndarray:
        return np.array([p.heading for p in self.poses], dtype=float)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([p.timestamp for p in self.poses], dtype=float)

    def arc_length(self) -> np.ndarray:
        """Cumulative Euclidean arc length at every pose, starting at 0."""
        step = np.hypot(*np.diff(self.xy, axis=0).T)
        return np.concatenate([[0.0], np.cumsum(step)])

    @property
    def length(self) -> float:
        return float(self.arc_length()[-1])


@dataclass(frozen=True)
class AngularSpeedSeries:
    arc_positions: np.ndarray
    values: np.ndarray
    per_run_values: np.ndarray | None = field(default=None)

    def __post_init__(self):
        s = np.asarray(self.arc_positions, dtype=float)
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "arc_positions", s)
        object.__setattr__(self, "values", v)
        if s.ndim != 1 or s.shape != v.shape:
            raise ValueError(f"arc_positions {s.shape} and values {v.shape} must be matching 1-d arrays")
        if s.size > 1 and np.any(np.diff(s) <= 0):
            raise ValueError("arc_positions must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise ValueError("angular speed values must be finite")
        if self.per_run_values is not None:
            m = np.asarray(self.per_run_values, dtype=float)
            if m.ndim != 2 or m.shape[1] != s.size:
                raise ValueError(f"per_run_values shape {m.shape} does not match {s.size} positions")
            object.__setattr__(self, "per_run_values", m)

    def __len__(self):
        return self.values.size

    @property
    def n_runs(self) -> int:
        return 1 if self.per_run_values is None else self.per_run_values.shape[0]


def estimate_angular_speed(traj: Trajectory) -> AngularSpeedSeries:
    """Finite-difference angular speed between consecutive poses.

    Sample i sits at the arc-length midpoint of poses i and i+1; the heading
    difference is wrapped so a crossing of +-pi reads as a small rotation.
    """
    t = traj.timestamps
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise DegenerateTimestepError(f"run {traj.run_id}: non-positive timestep")
    dtheta = wrap_angle(np.diff(traj.headings))
    s = traj.arc_length()
    return AngularSpeedSeries(0.5 * (s[:-1] + s[1:]), dtheta / dt)


def _grid(length: float, spacing: float) -> np.ndarray:
    n = int(math.floor(length / spacing + 1e-9)) + 1
    return np.arange(n) * spacing


def synchronize(trajs: Sequence[Trajectory], grid_spacing: float = 0.5, *,
                statistic: str = "mean", length_tolerance: float = 0.2,
                endpoint_radius: float | None = None) -> AngularSpeedSeries:
    """Aggregate several runs of one route into a single angular-speed series.

    Parameters
    ----------
    trajs : sequence of Trajectory
        Runs over the same route; the first one defines the arc-length grid.
    grid_spacing : float
        Grid step in meters along the reference route.
    statistic : {"mean", "median"}
        Cross-run aggregate at every grid position.
    length_tolerance : float
        Maximum relative difference of a run's total length from the reference.
    endpoint_radius : float, optional
        If given, every run must start and end within this radius (meters)
        of the reference run's endpoints.
    """
    if not trajs:
        raise ValueError("synchronize needs at least one trajectory")
    if grid_spacing <= 0:
        raise ValueError("grid_spacing must be positive")
    if statistic not in ("mean", "median"):
        raise ValueError(f"unknown statistic {statistic!r}")
    ref = trajs[0]
    ref_len = ref.length
    ref_xy = ref.xy
    grid = _grid(ref_len, grid_spacing)
    rows = []
    for tr in trajs:
        length = tr.length
        if abs(length - ref_len) > length_tolerance * ref_len:
            raise RouteMismatchError(
                f"run {tr.run_id}: length {length:.1f} m vs reference {ref_len:.1f} m")
        if endpoint_radius is not None:
            xy = tr.xy
            gap = max(np.hypot(*(xy[0] - ref_xy[0])), np.hypot(*(xy[-1] - ref_xy[-1])))
            if gap > endpoint_radius:
                raise RouteMismatchError(
                    f"run {tr.run_id}: endpoints {gap:.1f} m away from reference")
        series = estimate_angular_speed(tr)
        rows.append(np.interp(grid, series.arc_positions * (ref_len / length), series.values))
    per_run = np.vstack(rows)
    agg = per_run.mean(axis=0) if statistic == "mean" else np.median(per_run, axis=0)
    return AngularSpeedSeries(grid, agg, per_run)


def route_positions(traj: Trajectory, ref_length: float) -> np.ndarray:
    """Arc position of every pose, rescaled onto a reference route length."""
    s = traj.arc_length()
    return s * (ref_length / s[-1])


# -- files --------------------------------------------------------------

TRAJ_FIELDS = ("run_id", "t", "x", "y", "heading")


def write_trajectories(path, trajs: Iterable[Trajectory]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJ_FIELDS)
        for tr in trajs:
            for p in tr.poses:
                w.writerow([tr.run_id, repr(p.timestamp), repr(p.x), repr(p.y), repr(p.heading)])


def read_trajectories(path) -> list[Trajectory]:
    runs: dict[str, list[Pose]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRAJ_FIELDS:
            raise TrajectoryError(f"{path}: expected header {','.join(TRAJ_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                run_id, t, x, y, h = row
                pose = Pose(float(x), float(y), float(h), float(t))
            except ValueError as exc:
                raise TrajectoryError(f"{path}:{lineno}: malformed record {row!r}") from exc
            prev = runs.setdefault(run_id.strip(), [])
            if prev and pose.timestamp <= prev[-1].timestamp:
                raise DegenerateTimestepError(
                    f"{path}:{lineno}: timestamp {pose.timestamp} not after {prev[-1].timestamp}")
            prev.append(pose)
    return [Trajectory(rid, tuple(poses)) for rid, poses in runs.items()]


def write_series(path, series: AngularSpeedSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("arc_position", "value"))
        for s, v in zip(series.arc_positions, series.values):
            w.writerow((repr(float(s)), repr(float(v))))


def read_series(path) -> AngularSpeedSeries:
    s, v = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                s.append(float(row[0]))
                v.append(float(row[1]))
            except (ValueError, IndexError) as exc:
                raise TrajectoryError(f"{path}:{lineno}: malformed record {row!r}") from exc
    return AngularSpeedSeries(np.array(s), np.array(v))
