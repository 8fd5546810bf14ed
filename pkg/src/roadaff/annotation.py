"""Project future route poses into the ego camera and derive partial affordances."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .hdphmm import ActionSequence
from .labels import CLASSES, K, Action, parse_action
from .trajectory import Pose, Trajectory, route_positions


class UnlabelableFrameError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera rigidly mounted on the vehicle above a planar ground.

    ``mount_pitch`` tilts the optical axis downward; ``mount_offset`` is the
    camera position forward of the vehicle origin.
    """
    focal_px: float = 314.0
    principal_point: tuple[float, float] = (314.0, 157.0)
    image_size: tuple[int, int] = (628, 314)
    mount_height: float = 3.0
    mount_pitch: float = math.radians(8.0)
    mount_offset: float = 0.0

    def __post_init__(self):
        w, h = self.image_size
        u0, v0 = self.principal_point
        if self.focal_px <= 0:
            raise ValueError("focal_px must be positive")
        if not (0 <= u0 < w and 0 <= v0 < h):
            raise ValueError("principal point must lie inside the image")
        if self.mount_height <= 0:
            raise ValueError("mount_height must be positive")

    @property
    def width(self) -> int:
        return int(self.image_size[0])

    @property
    def height(self) -> int:
        return int(self.image_size[1])

    def vehicle_to_pixel(self, forward, left):
        """Project ground points given in the vehicle frame.

        Returns ``(u, v, depth)`` arrays; depth is along the optical axis.
        """
        d = np.asarray(forward, dtype=float) - self.mount_offset
        lat = np.asarray(left, dtype=float)
        c, s = math.cos(self.mount_pitch), math.sin(self.mount_pitch)
        h = self.mount_height
        xc = -lat
        yc = h * c - d * s
        zc = d * c + h * s
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.principal_point[0] + self.focal_px * xc / zc
            v = self.principal_point[1] + self.focal_px * yc / zc
        return u, v, zc

    def pixel_to_vehicle(self, u, v):
        """Back-project pixels onto the ground; NaN above the horizon."""
        c, s = math.cos(self.mount_pitch), math.sin(self.mount_pitch)
        a = (np.asarray(u, dtype=float) - self.principal_point[0]) / self.focal_px
        b = (np.asarray(v, dtype=float) - self.principal_point[1]) / self.focal_px
        # ray = a*x_c + b*y_c + z_c, expressed as (forward, left, up)
        fwd = -b * s + c
        up = -b * c - s
        left = -a
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(up < -1e-12, self.mount_height / -up, np.nan)
        return fwd * t + self.mount_offset, left * t

    def in_image(self, u, v):
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)


def world_to_vehicle(ego: Pose, x, y):
    dx = np.asarray(x, dtype=float) - ego.x
    dy = np.asarray(y, dtype=float) - ego.y
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    return c * dx + s * dy, -s * dx + c * dy


def project_points(cam: CameraModel, ego: Pose, x, y, min_depth: float = 0.1):
    """Vectorised projection; returns ``(u, v, visible)``."""
    fwd, left = world_to_vehicle(ego, x, y)
    u, v, depth = cam.vehicle_to_pixel(fwd, left)
    visible = (depth > min_depth) & cam.in_image(u, v)
    return u, v, visible


def project_pose(cam: CameraModel, ego: Pose, target: Pose):
    """Pixel of ``target``'s ground point in the ego camera, or None when out of view."""
    u, v, visible = project_points(cam, ego, target.x, target.y)
    if not bool(visible):
        return None
    return float(u), float(v)


@dataclass(frozen=True)
class PartialAffordance:
    frame_id: str
    known_class: Action
    attention_center: tuple[float, float]
    distance: float
    distance_valid: bool = True

    @property
    def label_vector(self) -> np.ndarray:
        y = np.zeros(K)
        y[self.known_class.index] = 1.0
        return y


@dataclass(frozen=True)
class ClassPrediction:
    present: bool
    score: float
    attention_center: tuple[float, float] | None = None
    distance: float | None = None


@dataclass(frozen=True)
class CompleteAffordance:
    frame_id: str
    classes: tuple[ClassPrediction, ClassPrediction, ClassPrediction]

    def __post_init__(self):
        if len(self.classes) != K:
            raise ValueError(f"need {K} per-class entries")
        for c in self.classes:
            if not c.present and (c.attention_center is not None or c.distance is not None):
                raise ValueError("attention center and distance are only defined for present classes")

    def __getitem__(self, action: Action) -> ClassPrediction:
        return self.classes[action.index]

    @property
    def present_set(self) -> frozenset[Action]:
        return frozenset(a for a, c in zip(CLASSES, self.classes) if c.present)


def annotate_frame(cam: CameraModel, ego: Pose, future: Sequence[tuple[Pose, Action]],
                   max_dist: float = 15.0, frame_id: str = "", ego_action: Action | None = None
                   ) -> PartialAffordance:
    """Partial affordance of one frame from the poses that follow it on the route.

    ``future`` lists the poses after ``ego`` in route order with their
    driving action. The window holds the poses whose route distance from the
    ego is at most ``max_dist``.
    """
    if max_dist <= 0:
        raise ValueError("max_dist must be positive")
    if not future:
        raise UnlabelableFrameError(f"frame {frame_id}: no future poses")
    xs = np.array([p.x for p, _ in future])
    ys = np.array([p.y for p, _ in future])
    actions = [a for _, a in future]
    steps = np.hypot(np.diff(np.concatenate([[ego.x], xs])), np.diff(np.concatenate([[ego.y], ys])))
    arc = np.cumsum(steps)
    n_win = int(np.searchsorted(arc, max_dist, side="right"))
    u, v, visible = project_points(cam, ego, xs[:n_win], ys[:n_win])
    euclid = np.hypot(xs[:n_win] - ego.x, ys[:n_win] - ego.y)

    # nearest turning segment with at least one projected pose
    turn = None
    i = 0
    while i < n_win:
        a = actions[i]
        j = i
        while j < n_win and actions[j] == a:
            j += 1
        if a.turning and visible[i:j].any():
            turn = (a, i, j)
            break
        i = j

    if turn is not None:
        a, i, j = turn
        sel = np.flatnonzero(visible[i:j]) + i
        center = (float(u[sel].mean()), float(v[sel].mean()))
        dist = 0.0 if ego_action is a else float(euclid[sel[0]])
        return PartialAffordance(frame_id, a, center, min(dist, max_dist), True)

    if not visible.any():
        raise UnlabelableFrameError(f"frame {frame_id}: no projectable pose within {max_dist} m")
    last = int(np.flatnonzero(visible)[-1])
    # route ending inside the window leaves the straight distance short of max_dist
    valid = n_win < len(future) or arc[-1] >= max_dist
    return PartialAffordance(frame_id, Action.STRAIGHT, (float(u[last]), float(v[last])),
                             min(float(euclid[last]), max_dist), bool(valid))


@dataclass(frozen=True)
class FrameRef:
    frame_id: str
    run_id: str
    pose_index: int


@dataclass(frozen=True)
class AnnotatedFrame:
    frame: FrameRef
    label: PartialAffordance


def pose_actions(traj: Trajectory, actions: ActionSequence) -> list[Action]:
    """Action at every pose of a run, via arc length rescaled to the segmented route."""
    return actions.action_at(route_positions(traj, float(actions.arc_positions[-1])))


def build_dataset(drives, cam: CameraModel = CameraModel(), max_dist: float = 15.0
                  ) -> tuple[list[AnnotatedFrame], int]:
    """Annotate every frame of every drive.

    ``drives`` yields ``(trajectory, action_sequence, frames)`` triples.
    Returns the annotated frames and the number of dropped unlabelable ones.
    """
    out: list[AnnotatedFrame] = []
    skipped = 0
    for traj, actions, frames in drives:
        per_pose = pose_actions(traj, actions)
        poses = traj.poses
        for fr in frames:
            i = fr.pose_index
            future = list(zip(poses[i + 1:], per_pose[i + 1:]))
            try:
                label = annotate_frame(cam, poses[i], future, max_dist, fr.frame_id, per_pose[i])
            except UnlabelableFrameError:
                skipped += 1
                continue
            out.append(AnnotatedFrame(fr, label))
    return out, skipped


# -- files --------------------------------------------------------------

ANNOTATION_FIELDS = ("frame_id", "class", "u", "v", "distance", "distance_valid")


def write_annotations(path, labels: Sequence[PartialAffordance]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ANNOTATION_FIELDS)
        for lb in labels:
            w.writerow((lb.frame_id, lb.known_class.value, repr(lb.attention_center[0]),
                        repr(lb.attention_center[1]), repr(lb.distance), int(lb.distance_valid)))


def read_annotations(path) -> list[PartialAffordance]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(PartialAffordance(
                row["frame_id"], parse_action(row["class"]),
                (float(row["u"]), float(row["v"])), float(row["distance"]),
                bool(int(row["distance_valid"]))))
    return out


AFFORDANCE_FIELDS = ("frame_id", "class", "present", "score", "u", "v", "distance")


def _opt(x):
    return "" if x is None else repr(float(x))


def write_affordances(path, records: Sequence[CompleteAffordance]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AFFORDANCE_FIELDS)
        for rec in records:
            for a, c in zip(CLASSES, rec.classes):
                u, v = c.attention_center if c.attention_center is not None else (None, None)
                w.writerow((rec.frame_id, a.value, int(c.present), repr(float(c.score)),
                            _opt(u), _opt(v), _opt(c.distance)))


def read_affordances(path) -> list[CompleteAffordance]:
    rows: dict[str, dict[Action, ClassPrediction]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            present = bool(int(row["present"]))
            center = (float(row["u"]), float(row["v"])) if row["u"] else None
            dist = float(row["distance"]) if row["distance"] else None
            rows.setdefault(row["frame_id"], {})[parse_action(row["class"])] = ClassPrediction(
                present, float(row["score"]), center, dist)
    out = []
    for fid, per in rows.items():
        missing = [a.value for a in CLASSES if a not in per]
        if missing:
            raise ValueError(f"{path}: frame {fid} lacks rows for {missing}")
        out.append(CompleteAffordance(fid, tuple(per[a] for a in CLASSES)))
    return out
