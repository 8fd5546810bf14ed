import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import homography, homography_project
from roadaff.annotation import (
    CameraModel, ClassPrediction, CompleteAffordance, FrameRef, PartialAffordance, UnlabelableFrameError,
    annotate_frame, build_dataset, pose_actions, project_points, project_pose, read_affordances,
    read_annotations, write_affordances, write_annotations,
)
from roadaff.hdphmm import ActionSequence
from roadaff.labels import Action
from roadaff.trajectory import Pose, Trajectory


def route_with_turn(turn_at, direction=Action.LEFT, spacing=0.25, radius=6.0, tail=20.0):
    """Ego at the origin heading +x, straight for ``turn_at`` meters, then a 90 degree arc and a straight exit."""
    poses, acts = [], []
    n_straight = int(round(turn_at / spacing))
    for i in range(1, n_straight + 1):
        poses.append((i * spacing, 0.0, 0.0))
        acts.append(Action.STRAIGHT)
    sgn = 1.0 if direction is Action.LEFT else -1.0
    n_arc = int(math.ceil(0.5 * math.pi * radius / spacing))
    for i in range(1, n_arc + 1):
        th = 0.5 * math.pi * i / n_arc
        poses.append((turn_at + radius * math.sin(th), sgn * radius * (1 - math.cos(th)), sgn * th))
        acts.append(direction)
    ex, ey = turn_at + radius, sgn * radius
    for i in range(1, int(tail / spacing) + 1):
        poses.append((ex, ey + sgn * i * spacing, sgn * 0.5 * math.pi))
        acts.append(Action.STRAIGHT)
    return [(Pose(x, y, h, 0.0), a) for (x, y, h), a in zip(poses, acts)]


EGO = Pose(0.0, 0.0, 0.0, 0.0)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(focal_px=0)
    with pytest.raises(ValueError):
        CameraModel(principal_point=(700, 10))
    with pytest.raises(ValueError):
        CameraModel(mount_height=0)


def test_projection_matches_homography_oracle(cam):
    H = homography(cam.focal_px, cam.principal_point, cam.mount_height, cam.mount_pitch)
    ego = Pose(3.0, -2.0, 0.7, 0.0)
    fwd, left = np.meshgrid(np.linspace(3, 40, 10), np.linspace(-8, 8, 10))
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    wx = ego.x + c * fwd.ravel() - s * left.ravel()
    wy = ego.y + s * fwd.ravel() + c * left.ravel()
    expect = homography_project(H, (ego.x, ego.y, ego.heading), np.column_stack([wx, wy]))
    for (x, y), (eu, ev) in zip(zip(wx, wy), expect):
        got = project_pose(cam, ego, Pose(x, y, 0.0, 0.0))
        if got is None:
            assert not cam.in_image(eu, ev)
            continue
        assert abs(got[0] - eu) < 1e-6 and abs(got[1] - ev) < 1e-6


def test_projection_with_mount_offset_matches_oracle():
    cam = CameraModel(mount_offset=1.2, mount_pitch=math.radians(5))
    H = homography(cam.focal_px, cam.principal_point, cam.mount_height, cam.mount_pitch, cam.mount_offset)
    pts = np.array([[10.0, 1.0], [7.0, -2.0], [30.0, 0.0]])
    u, v, vis = project_points(cam, EGO, pts[:, 0], pts[:, 1])
    assert np.all(vis)
    assert np.allclose(np.column_stack([u, v]), homography_project(H, (0, 0, 0), pts), atol=1e-6)


HORIZON_V = 157.0 - 314.0 * math.tan(CameraModel().mount_pitch)   # about 112.9 px


@settings(max_examples=50, deadline=None)
@given(st.floats(-300, 313.9), st.floats(HORIZON_V + 1.0, 313.9))
def test_pixel_ground_round_trip(u, v):
    cam = CameraModel()
    fwd, left = cam.pixel_to_vehicle(u + 314.0, v)
    uu, vv, depth = cam.vehicle_to_pixel(fwd, left)
    assert depth > 0
    assert uu == pytest.approx(u + 314.0, abs=1e-6) and vv == pytest.approx(v, abs=1e-6)


def test_above_horizon_is_nan(cam):
    fwd, _ = cam.pixel_to_vehicle(314.0, 10.0)
    assert np.isnan(fwd)


def test_behind_camera_not_visible(cam):
    assert project_pose(cam, EGO, Pose(-5.0, 0.0, 0.0, 0.0)) is None
    assert project_pose(cam, EGO, Pose(5.0, 0.0, 0.0, 0.0)) is not None


def test_turn_at_8m_labelled_with_distance():
    lab = annotate_frame(CameraModel(), EGO, route_with_turn(8.0, Action.LEFT), max_dist=15.0)
    assert lab.known_class is Action.LEFT
    assert abs(lab.distance - 8.0) <= 0.25


def test_right_turn_class():
    lab = annotate_frame(CameraModel(), EGO, route_with_turn(8.0, Action.RIGHT))
    assert lab.known_class is Action.RIGHT
    u, v = lab.attention_center
    assert u > 314  # to the right of the image centre


def test_turn_beyond_max_dist_flips_to_straight():
    lab = annotate_frame(CameraModel(), EGO, route_with_turn(15.5, Action.LEFT), max_dist=15.0)
    assert lab.known_class is Action.STRAIGHT
    assert lab.distance == pytest.approx(15.0, abs=0.25)


def test_inside_turn_distance_zero():
    fut = route_with_turn(8.0, Action.LEFT)
    # ego standing at the start of the arc, itself turning
    i = next(k for k, (_, a) in enumerate(fut) if a is Action.LEFT)
    ego = fut[i][0]
    lab = annotate_frame(CameraModel(), ego, fut[i + 1:], ego_action=Action.LEFT)
    assert lab.known_class is Action.LEFT and lab.distance == 0.0


def test_straight_center_is_farthest_visible_pose():
    fut = [(Pose(0.5 * i, 0.0, 0.0, 0.0), Action.STRAIGHT) for i in range(1, 60)]
    lab = annotate_frame(CameraModel(), EGO, fut, max_dist=15.0)
    expect = project_pose(CameraModel(), EGO, Pose(15.0, 0.0, 0.0, 0.0))
    assert lab.attention_center == pytest.approx(expect)
    assert lab.distance_valid


def test_route_end_inside_window_marks_distance_invalid():
    fut = [(Pose(0.5 * i, 0.0, 0.0, 0.0), Action.STRAIGHT) for i in range(1, 12)]
    lab = annotate_frame(CameraModel(), EGO, fut, max_dist=15.0)
    assert not lab.distance_valid


def test_unlabelable_frame():
    behind = [(Pose(-0.5 * i, 0.0, 0.0, 0.0), Action.STRAIGHT) for i in range(1, 10)]
    with pytest.raises(UnlabelableFrameError):
        annotate_frame(CameraModel(), EGO, behind)
    with pytest.raises(UnlabelableFrameError):
        annotate_frame(CameraModel(), EGO, [])


def test_label_vector():
    lab = PartialAffordance("f", Action.RIGHT, (1.0, 2.0), 3.0)
    assert lab.label_vector.tolist() == [0.0, 0.0, 1.0]


def test_complete_affordance_rejects_absent_geometry():
    with pytest.raises(ValueError):
        CompleteAffordance("f", (ClassPrediction(False, 0.1, (1.0, 1.0), 2.0),
                                 ClassPrediction(True, 1.0, (1.0, 1.0), 2.0), ClassPrediction(False, 0.0)))


def test_build_dataset_over_a_drive():
    fut = route_with_turn(30.0, Action.LEFT, spacing=0.5)
    poses = [EGO] + [p for p, _ in fut]
    traj = Trajectory("r", tuple(Pose(p.x, p.y, p.heading, 0.1 * i) for i, p in enumerate(poses)))
    arc = traj.arc_length()
    acts = ActionSequence.from_actions(arc, [Action.STRAIGHT] + [a for _, a in fut])
    assert pose_actions(traj, acts)[1:] == [a for _, a in fut]
    frames = [FrameRef(f"r_{i}", "r", i) for i in range(0, 60, 5)]
    data, skipped = build_dataset([(traj, acts, frames)])
    assert skipped == 0 and len(data) == len(frames)
    classes = [d.label.known_class for d in data]
    assert classes[0] is Action.STRAIGHT and Action.LEFT in classes


def test_annotation_files_round_trip(tmp_path):
    labs = [PartialAffordance("a", Action.LEFT, (10.5, 200.25), 7.125),
            PartialAffordance("b", Action.STRAIGHT, (314.0, 120.0), 15.0, False)]
    write_annotations(tmp_path / "a.csv", labs)
    assert read_annotations(tmp_path / "a.csv") == labs


def test_affordance_files_round_trip(tmp_path):
    recs = [CompleteAffordance("a", (ClassPrediction(True, 0.95, (10.0, 20.0), 4.5),
                                     ClassPrediction(False, 0.2), ClassPrediction(True, 0.99, (400.0, 150.0), 0.0)))]
    write_affordances(tmp_path / "p.csv", recs)
    assert read_affordances(tmp_path / "p.csv") == recs
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "frame_id,class,present,score,u,v,distance" and len(lines) == 4
