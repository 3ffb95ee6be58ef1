import math

import numpy as np
import pytest

from autobox3d import geometry, grad
from autobox3d.geometry import Box2D, CameraFrame, InstanceBox, Ray

from conftest import rel_err


def make_frame(f=500.0, cx=500.0, cy=500.0, width=1000, height=1000, rotation=None,
               translation=None, time=0.0):
    return CameraFrame(
        K=np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]]),
        rotation=np.eye(3) if rotation is None else rotation,
        translation=np.zeros(3) if translation is None else translation,
        time=time,
        width=width,
        height=height,
    )


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def test_rot_y_identity():
    assert np.allclose(geometry.rot_y(0.0), np.eye(3))


def test_rot_y_half_turn():
    R = geometry.rot_y(math.pi)
    assert np.allclose(R @ np.array([1.0, 0, 0]), [-1, 0, 0], atol=1e-12)
    assert np.allclose(R @ np.array([0, 0, 1.0]), [0, 0, -1], atol=1e-12)


def test_rot_y_inverse_composition():
    R = geometry.rot_y(0.3) @ geometry.rot_y(-0.3)
    assert np.abs(R - np.eye(3)).max() < 1e-12


def test_rot_y_additivity_and_orthonormality():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.uniform(-3, 3, 2)
        assert np.allclose(geometry.rot_y(a) @ geometry.rot_y(b), geometry.rot_y(a + b), atol=1e-12)
        R = geometry.rot_y(a)
        assert np.abs(R @ R.T - np.eye(3)).max() < 1e-9
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


def test_heading_convention():
    # yaw pi/2 points the box x-axis along world +z
    assert np.allclose(geometry.rot_y(math.pi / 2) @ np.array([1.0, 0, 0]), [0, 0, 1], atol=1e-12)


# ---------------------------------------------------------------------------
# cuboid SDF
# ---------------------------------------------------------------------------

def test_cuboid_sdf_unit_cube_examples():
    cube = InstanceBox.static(np.ones(3), np.zeros(3))
    assert geometry.cuboid_sdf(np.zeros(3), cube) == pytest.approx(-0.5, abs=1e-9)
    assert geometry.cuboid_sdf(np.array([2.0, 0, 0]), cube) == pytest.approx(1.5, abs=1e-9)
    assert geometry.cuboid_sdf(np.array([1.0, 1, 1]), cube) == pytest.approx(math.sqrt(0.75), abs=1e-9)


def test_cuboid_sdf_rejects_bad_dims():
    with pytest.raises(ValueError):
        InstanceBox.static(np.array([1.0, 0.0, 1.0]), np.zeros(3))


def test_cuboid_sdf_vs_brute_force():
    rng = np.random.default_rng(42)
    for _ in range(60):
        box = InstanceBox.static(rng.uniform(0.5, 4.0, 3), rng.uniform(-3, 3, 3), rng.uniform(-3.1, 3.1))
        p = rng.uniform(-6, 6, 3)
        got = geometry.cuboid_sdf(p, box)
        want = geometry.cuboid_sdf_brute_force(p, box)
        assert abs(got - want) < 2e-4, (got, want)


def test_cuboid_sdf_rigid_invariance():
    rng = np.random.default_rng(1)
    for _ in range(30):
        box = InstanceBox.static(rng.uniform(0.5, 3, 3), rng.uniform(-2, 2, 3), rng.uniform(-3, 3))
        p = rng.uniform(-5, 5, 3)
        base = geometry.cuboid_sdf(p, box)
        dtheta = rng.uniform(-3, 3)
        shift = rng.uniform(-4, 4, 3)
        R = geometry.rot_y(dtheta)
        moved = InstanceBox.static(box.dims, R @ box.loc + shift, box.yaw + dtheta)
        p2 = R @ p + shift
        assert abs(geometry.cuboid_sdf(p2, moved) - base) < 1e-9


def test_cuboid_sdf_time_shift():
    box = InstanceBox(np.ones(3), np.zeros(3), 0.0, np.array([1.0, 0, 0]), dynamic=True)
    # at t=2 the cube is centered at (2,0,0)
    assert geometry.cuboid_sdf(np.array([2.0, 0, 0]), box, t=2.0) == pytest.approx(-0.5, abs=1e-12)


def test_cuboid_multi_matches_single():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-5, 5, (50, 3))
    dims = rng.uniform(0.5, 3, (5, 3))
    locs = rng.uniform(-3, 3, (5, 3))
    yaws = rng.uniform(-3, 3, 5)
    multi = geometry.cuboid_sdf_multi(pts, dims, locs, yaws)
    for i in range(5):
        single = geometry.cuboid_sdf_points(pts, dims[i], locs[i], yaws[i])
        assert np.allclose(multi[i], single, atol=1e-12)


def test_cuboid_multi_per_point_times():
    vel = np.array([2.0, 0.0, 0.0])
    box = InstanceBox(np.ones(3), np.zeros(3), 0.0, vel, dynamic=True)
    pts = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    dt = np.array([0.0, 1.0])
    out = geometry.cuboid_sdf_multi(
        pts, box.dims[None], box.loc[None], np.array([0.0]),
        vels=vel[None], dyn_gate=np.array([True]), dt_points=dt,
    )
    assert out[0, 0] == pytest.approx(-0.5, abs=1e-12)  # t=0 at center
    assert out[0, 1] == pytest.approx(-0.5, abs=1e-12)  # t=1, box moved to x=2


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def test_project_point_optical_axis():
    frame = make_frame()
    uv, depth = geometry.project_point(frame, np.array([0.0, 0, 1]))
    assert np.allclose(uv, [500.0, 500.0])
    assert depth == pytest.approx(1.0)


def test_project_point_similar_triangles():
    frame = make_frame()
    uv, depth = geometry.project_point(frame, np.array([1.0, 0, 2]))
    assert np.allclose(uv, [500.0 + 250.0, 500.0])
    assert depth == pytest.approx(2.0)


def test_project_point_round_trip_random_pose():
    rng = np.random.default_rng(5)
    for _ in range(20):
        frame = make_frame(rotation=random_rotation(rng), translation=rng.uniform(-5, 5, 3))
        p = frame.cam_to_world(np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 20)]))
        uv, depth = geometry.project_point(frame, p)
        back = geometry.unproject_pixel(frame, uv[0], uv[1], depth)
        assert np.linalg.norm(back - p) < 1e-9


def test_project_point_behind_camera():
    frame = make_frame()
    with pytest.raises(geometry.BehindCameraError):
        geometry.project_point(frame, np.array([0.0, 0, -1]))


def test_project_box_analytic_cube():
    frame = make_frame()
    cube = InstanceBox.static(np.ones(3), np.array([0.0, 0, 10.0]))
    box2d = geometry.project_box(cube, frame)
    # near-face corners at depth 9.5 project widest: 500 * 0.5 / 9.5
    half_span = 500.0 * 0.5 / 9.5
    assert box2d.xmin == pytest.approx(500.0 - half_span, abs=1e-9)
    assert box2d.xmax == pytest.approx(500.0 + half_span, abs=1e-9)
    assert box2d.ymin == pytest.approx(500.0 - half_span, abs=1e-9)
    assert not box2d.truncated


def test_project_box_contains_every_vertex():
    rng = np.random.default_rng(11)
    frame = make_frame()
    for _ in range(25):
        box = InstanceBox.static(rng.uniform(0.5, 2, 3), np.array([rng.uniform(-3, 3), rng.uniform(-2, 2), rng.uniform(6, 25)]), rng.uniform(-3, 3))
        b2 = geometry.project_box(box, frame, clip_to_image=False)
        for corner in box.corners():
            uv, _ = geometry.project_point(frame, corner)
            assert b2.xmin - 1e-9 <= uv[0] <= b2.xmax + 1e-9
            assert b2.ymin - 1e-9 <= uv[1] <= b2.ymax + 1e-9


def test_project_box_velocity_shift():
    frame0 = make_frame(time=0.0)
    frame2 = make_frame(time=2.0)
    moving = InstanceBox(np.ones(3), np.array([0.0, 0, 10]), 0.0, np.array([1.0, 0, 0]), dynamic=True)
    static_far = InstanceBox.static(np.ones(3), np.array([2.0, 0, 10]))
    assert geometry.project_box(moving, frame0).as_array() == pytest.approx(
        geometry.project_box(InstanceBox.static(np.ones(3), np.array([0.0, 0, 10])), frame0).as_array()
    )
    assert geometry.project_box(moving, frame2).as_array() == pytest.approx(
        geometry.project_box(static_far, frame2).as_array()
    )


def test_project_box_static_time_independent():
    box = InstanceBox.static(np.ones(3), np.array([1.0, 0, 12]))
    a = geometry.project_box(box, make_frame(time=0.0)).as_array()
    b = geometry.project_box(box, make_frame(time=9.0)).as_array()
    assert np.allclose(a, b)


def test_project_box_truncation_flag():
    frame = make_frame()
    # box straddling the camera plane: center in front, some vertices behind
    box = InstanceBox.static(np.array([1.0, 1.0, 4.0]), np.array([0.0, 0, 1.5]))
    b2 = geometry.project_box(box, frame)
    assert b2.truncated
    behind = InstanceBox.static(np.ones(3), np.array([0.0, 0, -5.0]))
    with pytest.raises(geometry.BehindCameraError):
        geometry.project_box(behind, frame)


# ---------------------------------------------------------------------------
# overlap measures
# ---------------------------------------------------------------------------

def test_iou2d_examples():
    a = Box2D(0, 0, 2, 2)
    assert geometry.iou2d(a, a) == pytest.approx(1.0)
    assert geometry.iou2d(a, Box2D(3, 3, 4, 4)) == pytest.approx(0.0)
    assert geometry.iou2d(a, Box2D(1, 1, 3, 3)) == pytest.approx(1.0 / 7.0)


def test_iou2d_symmetry_and_range():
    rng = np.random.default_rng(2)
    for _ in range(50):
        x = np.sort(rng.uniform(0, 10, 2))
        y = np.sort(rng.uniform(0, 10, 2))
        a = Box2D(x[0], y[0], x[1], y[1])
        x = np.sort(rng.uniform(0, 10, 2))
        y = np.sort(rng.uniform(0, 10, 2))
        b = Box2D(x[0], y[0], x[1], y[1])
        iab = float(geometry.iou2d(a, b))
        iba = float(geometry.iou2d(b, a))
        assert iab == pytest.approx(iba, abs=1e-12)
        assert 0.0 <= iab <= 1.0
        d = float(geometry.diou2d(a, b))
        assert d <= iab + 1e-12


def test_diou2d_examples():
    a = Box2D(0, 0, 1, 1)
    assert geometry.diou2d(a, a) == pytest.approx(1.0)
    b = Box2D(2, 0, 3, 1)
    assert geometry.diou2d(a, b) == pytest.approx(-0.4)


def test_diou2d_limit_toward_minus_one():
    a = Box2D(0, 0, 1, 1)
    values = []
    for shift in (10.0, 100.0, 1000.0):
        b = Box2D(shift, 0, shift + 1, 1)
        values.append(float(geometry.diou2d(a, b)))
    assert all(v > -1.0 for v in values)
    assert values[2] < values[1] < values[0]
    assert values[2] == pytest.approx(-1.0, abs=1e-2)


def test_diou_equals_iou_iff_centers_match():
    a = Box2D(0, 0, 2, 2)
    b = Box2D(0.5, 0.5, 1.5, 1.5)  # same center
    assert float(geometry.diou2d(a, b)) == pytest.approx(float(geometry.iou2d(a, b)), abs=1e-12)
    c = Box2D(0.6, 0.5, 1.6, 1.5)
    assert float(geometry.diou2d(a, c)) < float(geometry.iou2d(a, c))


def test_iou3d_identity_and_symmetry():
    box = InstanceBox.static(np.array([2.0, 1, 1.5]), np.array([1.0, 2, 3]), 0.7)
    assert geometry.iou3d(box, box) == pytest.approx(1.0, abs=1e-9)


def test_iou3d_offset_cubes():
    a = InstanceBox.static(np.ones(3), np.zeros(3))
    b = InstanceBox.static(np.ones(3), np.array([0.5, 0, 0]))
    assert geometry.iou3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-9)


def test_iou3d_rotated_vs_monte_carlo():
    a = InstanceBox.static(np.ones(3), np.zeros(3), 0.0)
    b = InstanceBox.static(np.ones(3), np.zeros(3), math.pi / 4)
    got = geometry.iou3d(a, b)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.8, 0.8, size=(200_000, 3))
    ina = np.all(np.abs(pts) <= 0.5, axis=1)
    Rb = geometry.rot_y(math.pi / 4)
    pb = pts @ Rb
    inb = np.all(np.abs(pb) <= 0.5, axis=1)
    vol = 1.6**3
    inter = ina & inb
    union = ina | inb
    mc = inter.sum() / union.sum()
    assert abs(got - mc) < 5e-3


def test_huber_examples():
    assert float(geometry.huber(0.0)) == 0.0
    assert float(geometry.huber(1.0, 1.0)) == pytest.approx(0.5)
    assert float(geometry.huber(3.0, 1.0)) == pytest.approx(2.5)
    assert float(geometry.huber(-3.0, 1.0)) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        geometry.huber(1.0, 0.0)


def test_huber_continuity_at_delta():
    d = 0.7
    eps = 1e-9
    lo = float(geometry.huber(d - eps, d))
    hi = float(geometry.huber(d + eps, d))
    assert abs(lo - hi) < 1e-6


def test_wrap_angle():
    assert geometry.wrap_angle(math.pi) == pytest.approx(math.pi)
    assert geometry.wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert geometry.wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert geometry.wrap_angle(0.1) == pytest.approx(0.1)
