import math

import numpy as np
import pytest

from autobox3d import initialization as init
from autobox3d.config import InitConfig
from autobox3d.geometry import CameraFrame, InstanceBox
from autobox3d.initialization import InstanceCloud


def make_frame(translation=None, time=0.0, frame_id=0, mask=None, f=300.0, w=320, h=240):
    return CameraFrame(
        K=np.array([[f, 0, w / 2], [0, f, h / 2], [0, 0, 1.0]]),
        rotation=np.eye(3),
        translation=np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64),
        time=time,
        width=w,
        height=h,
        frame_id=frame_id,
        mask=mask,
    )


def cloud(points, fid=0, time=0.0, iid=1):
    return InstanceCloud(np.asarray(points, dtype=np.float64), iid, fid, time)


# ---------------------------------------------------------------------------
# erosion
# ---------------------------------------------------------------------------

def test_erode_identity_k1():
    mask = np.random.default_rng(0).random((20, 20)) > 0.5
    out = init.erode_mask(mask, 1)
    assert np.array_equal(out, mask)


def test_erode_square():
    mask = np.zeros((20, 20), dtype=bool)
    mask[5:15, 5:15] = True  # 10x10
    out = init.erode_mask(mask, 3)
    assert out.sum() == 8 * 8
    assert out[6:14, 6:14].all()


def test_erode_anti_extensive():
    rng = np.random.default_rng(1)
    for k in (3, 5):
        mask = rng.random((30, 30)) > 0.4
        out = init.erode_mask(mask, k)
        assert not np.any(out & ~mask)


def test_erode_rejects_even_kernel():
    with pytest.raises(ValueError):
        init.erode_mask(np.ones((5, 5), dtype=bool), 2)


# ---------------------------------------------------------------------------
# warp filter
# ---------------------------------------------------------------------------

def test_warp_identical_images_zero_disparity():
    rng = np.random.default_rng(2)
    img = rng.random((40, 60))
    depth = np.full((40, 60), 10.0)
    valid = init.warp_filter(img, img, depth, baseline=0.0, focal=300.0, eta1=0.01)
    assert valid.all()


def test_warp_threshold_infinite():
    rng = np.random.default_rng(3)
    left = rng.random((30, 50))
    right = rng.random((30, 50))
    depth = np.full((30, 50), 10.0)
    valid = init.warp_filter(left, right, depth, 0.5, 300.0, eta1=np.inf)
    # everything whose warp lands in bounds passes
    disparity = 0.5 * 300.0 / 10.0
    assert valid[:, int(np.ceil(disparity)) + 1 :].all()
    assert not valid[:, : int(np.floor(disparity))].any()


def test_warp_detects_wrong_depth():
    rng = np.random.default_rng(4)
    h, w = 40, 120
    xs = np.arange(w)[None, :].repeat(h, axis=0).astype(np.float64)
    texture = np.sin(xs * 0.7) * 0.5 + 0.5
    true_depth = 12.0
    baseline, focal = 0.54, 300.0
    disp = baseline * focal / true_depth
    ys = np.arange(h)[:, None].repeat(w, axis=1).astype(np.float64)
    # right image = left shifted so that left(u) == right(u - disp)
    right, _ = init._bilinear(texture, xs + disp, ys)
    good = init.warp_filter(texture, right, np.full((h, w), true_depth), baseline, focal, eta1=0.05)
    bad = init.warp_filter(texture, right, np.full((h, w), true_depth / 2.0), baseline, focal, eta1=0.05)
    margin = int(3 * disp) + 2
    inner = np.s_[:, margin:-margin]
    assert good[inner].mean() > 0.95
    assert bad[inner].mean() < 0.5


def test_warp_monocular_passthrough():
    depth = np.full((10, 10), 5.0)
    depth[0, 0] = 0.0
    with pytest.warns(UserWarning):
        valid = init.warp_filter(np.ones((10, 10)), None, depth, 0.5, 300.0, 0.05)
    assert not valid[0, 0]
    assert valid[1:].all()


# ---------------------------------------------------------------------------
# unprojection
# ---------------------------------------------------------------------------

def test_unproject_principal_point():
    frame = make_frame()
    depth = np.zeros((240, 320))
    mask = np.zeros((240, 320), dtype=bool)
    # pixel whose center is the principal point: (cx, cy) = (160, 120) -> pixel (159.5?, ...)
    # use pixel (160, 120): center (160.5, 120.5); adjust by putting the point there
    depth[120, 160] = 5.0
    mask[120, 160] = True
    out = init.unproject(depth, mask, frame)
    expect = np.array([(160.5 - 160.0) / 300.0 * 5.0, (120.5 - 120.0) / 300.0 * 5.0, 5.0])
    assert np.allclose(out.points[0], expect, atol=1e-9)


def test_unproject_project_round_trip():
    from autobox3d import geometry

    frame = make_frame(translation=[1.0, -2.0, 3.0])
    depth = np.zeros((240, 320))
    mask = np.zeros((240, 320), dtype=bool)
    pixels = [(40, 30), (200, 100), (310, 230)]
    for x, y in pixels:
        depth[y, x] = 7.5
        mask[y, x] = True
    out = init.unproject(depth, mask, frame)
    for p in out.points:
        uv, d = geometry.project_point(frame, p)
        assert d == pytest.approx(7.5, abs=1e-9)
        x, y = int(uv[0] - 0.5), int(uv[1] - 0.5)
        assert mask[y, x]


def test_unproject_empty_allowed():
    frame = make_frame()
    out = init.unproject(np.zeros((240, 320)), np.zeros((240, 320), dtype=bool), frame)
    assert out.count == 0


# ---------------------------------------------------------------------------
# density filter
# ---------------------------------------------------------------------------

def test_density_filter_eta_zero_identity():
    pts = np.random.default_rng(5).uniform(-1, 1, (50, 3))
    c = cloud(pts)
    out = init.density_filter(c, 0.3, 0)
    assert np.array_equal(out.points, pts)


def test_density_filter_removes_outliers():
    rng = np.random.default_rng(6)
    dense = rng.normal(0.0, 0.05, (200, 3))
    r = 0.3
    outliers = np.array([[5 * r * (i + 1), 0, 0] for i in range(5)])
    c = cloud(np.vstack([dense, outliers]))
    out = init.density_filter(c, r, 8)
    assert out.count == 200
    assert np.max(np.linalg.norm(out.points, axis=1)) < 5 * r


def test_density_filter_subset():
    rng = np.random.default_rng(7)
    pts = rng.uniform(-1, 1, (100, 3))
    c = cloud(pts)
    out = init.density_filter(c, 0.2, 3)
    as_set = {tuple(p) for p in out.points}
    assert as_set <= {tuple(p) for p in pts}


# ---------------------------------------------------------------------------
# ICP
# ---------------------------------------------------------------------------

def box_surface_cloud(rng, n=400):
    pts = rng.uniform(-1, 1, (n, 3)) * np.array([2.0, 0.8, 1.0])
    axis = rng.integers(0, 3, n)
    sign = rng.choice([-1.0, 1.0], n)
    for i in range(n):
        pts[i, axis[i]] = sign[i] * [2.0, 0.8, 1.0][axis[i]]
    return pts


def test_icp_identity():
    rng = np.random.default_rng(8)
    pts = box_surface_cloud(rng)
    res = init.icp_rigid(pts, pts)
    assert res.rms < 1e-9
    assert np.allclose(res.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(res.translation, 0.0, atol=1e-9)


def test_icp_translation_recovery():
    rng = np.random.default_rng(9)
    pts = box_surface_cloud(rng)
    res = init.icp_rigid(pts, pts + np.array([1.0, 0.0, 0.0]))
    assert np.allclose(res.translation, [1.0, 0, 0], atol=1e-6)
    assert np.allclose(res.rotation, np.eye(3), atol=1e-6)


def test_icp_rotation_recovery():
    from autobox3d import geometry

    rng = np.random.default_rng(10)
    pts = box_surface_cloud(rng)
    R = geometry.rot_y(math.radians(10.0))
    res = init.icp_rigid(pts, pts @ R.T)
    angle = math.degrees(math.acos(np.clip((np.trace(res.rotation) - 1) / 2, -1, 1)))
    assert abs(angle - 10.0) < 0.1


def test_icp_needs_three_points():
    with pytest.raises(ValueError):
        init.icp_rigid(np.zeros((2, 3)), np.zeros((5, 3)))


def test_icp_flags_collinear():
    line = np.column_stack([np.linspace(0, 1, 30), np.zeros(30), np.zeros(30)])
    res = init.icp_rigid(line, line + np.array([0.5, 0, 0]))
    assert res.degenerate


# ---------------------------------------------------------------------------
# velocity / dynamic mask
# ---------------------------------------------------------------------------

def test_estimate_velocity_static():
    rng = np.random.default_rng(11)
    pts = box_surface_cloud(rng)
    clouds = [cloud(pts, fid=i, time=0.5 * i) for i in range(4)]
    v, ok = init.estimate_velocity(clouds)
    assert ok
    assert np.linalg.norm(v) < 1e-6


def test_estimate_velocity_constant_motion():
    rng = np.random.default_rng(12)
    pts = box_surface_cloud(rng)
    clouds = [cloud(pts + np.array([0.5 * i, 0, 0]), fid=i, time=0.5 * i) for i in range(5)]
    v, ok = init.estimate_velocity(clouds)
    assert ok
    assert np.linalg.norm(v - np.array([1.0, 0, 0])) < 1e-3


def test_estimate_velocity_count_weighting():
    rng = np.random.default_rng(13)
    big = box_surface_cloud(rng, n=1000)
    small = box_surface_cloud(rng, n=100)
    # pair 1 (weight 1000): displacement (1,0,0)/s; pair 2 (weight 100): stationary
    clouds = [
        cloud(big, fid=0, time=0.0),
        cloud(big + np.array([1.0, 0, 0]), fid=1, time=1.0),
    ]
    v1, _ = init.estimate_velocity(clouds)
    clouds_small = [
        cloud(small, fid=0, time=0.0),
        cloud(small, fid=1, time=1.0),
    ]
    # combined: velocities (1,0,0) weighted 1000 and (0,0,0) weighted 100
    combined = [clouds[0], cloud(np.vstack([big + np.array([1.0, 0, 0])]), 1, 1.0)]
    v_mixed, _ = init.estimate_velocity(
        [clouds[0], clouds[1], cloud(big + np.array([1.0, 0, 0]), 2, 2.0)]
    )
    # hand-computed weighted mean of per-pair velocities
    pair_vs = np.array([[1.0, 0, 0], [0.0, 0, 0]])
    weights = np.array([1000.0, 100.0])
    expect = (pair_vs * weights[:, None]).sum(axis=0) / weights.sum()
    got = (np.array([1.0, 0, 0]) * 1000 + np.array([0.0, 0, 0]) * 100) / 1100
    assert np.allclose(expect, got)
    assert np.linalg.norm(v1 - [1.0, 0, 0]) < 1e-3
    assert np.linalg.norm(v_mixed - [1.0, 0, 0]) < 1e-3


def test_estimate_velocity_needs_two_frames():
    rng = np.random.default_rng(14)
    v, ok = init.estimate_velocity([cloud(box_surface_cloud(rng), 0, 0.0)])
    assert not ok
    assert np.allclose(v, 0.0)


def test_dynamic_mask_threshold():
    assert init.dynamic_mask(np.zeros(3)) is False
    assert init.dynamic_mask(np.array([1.0, 0, 0])) is True
    assert init.dynamic_mask(np.array([0.03, 0, 0])) is False  # strict >
    assert init.dynamic_mask(np.array([0.0300001, 0, 0])) is True
    assert init.dynamic_mask(np.array([10.0, 0, 0]), valid=False) is False


def test_dynamic_mask_time_scale_consistency():
    rng = np.random.default_rng(15)
    pts = box_surface_cloud(rng)
    v_true = np.array([0.05, 0, 0])
    for dt in (0.5, 1.0, 2.0):
        clouds = [cloud(pts + v_true * (dt * i), fid=i, time=dt * i) for i in range(4)]
        v, ok = init.estimate_velocity(clouds)
        assert init.dynamic_mask(v, ok) is True


# ---------------------------------------------------------------------------
# location / orientation init
# ---------------------------------------------------------------------------

def test_init_location_dense_centroid():
    rng = np.random.default_rng(16)
    pts = rng.normal(0, 0.3, (150, 3)) + np.array([1.0, 2.0, 10.0])
    c = cloud(pts, fid=0, time=0.0)
    loc, ok = init.init_location([c], 0.0, np.zeros(3), False, min_points=100)
    assert ok
    assert np.allclose(loc, pts.mean(axis=0))


def test_init_location_velocity_propagation():
    sparse = cloud(np.zeros((50, 3)), fid=1, time=1.0)
    dense = cloud(np.zeros((150, 3)) + np.array([0.0, 0.0, 10.0]), fid=0, time=0.0)
    v = np.array([1.0, 0, 0])
    loc, ok = init.init_location([dense, sparse], 1.0, v, True, min_points=100)
    assert ok
    assert np.allclose(loc, [1.0, 0, 10.0])


def test_init_location_boundary_100():
    pts = np.zeros((100, 3)) + np.array([5.0, 0, 0])
    c = cloud(pts, fid=0, time=0.0)
    loc, ok = init.init_location([c], 0.0, np.zeros(3), False, min_points=100)
    assert ok and np.allclose(loc, [5.0, 0, 0])


def test_init_location_no_clouds():
    _, ok = init.init_location([], 0.0, np.zeros(3), False)
    assert not ok


def test_init_orientation_velocity_aligned():
    yaw, ok = init.init_orientation(np.zeros((0, 3)), np.array([1.0, 0, 0]), dynamic=True)
    assert ok and yaw == pytest.approx(0.0)
    yaw, ok = init.init_orientation(np.zeros((0, 3)), np.array([0.0, 0, 1.0]), dynamic=True)
    assert ok and yaw == pytest.approx(math.pi / 2)


def test_init_orientation_static_pca():
    rng = np.random.default_rng(17)
    theta = math.radians(30.0)
    from autobox3d import geometry

    local = np.column_stack(
        [rng.uniform(-2.0, 2.0, 500), rng.uniform(-0.7, 0.7, 500), rng.uniform(-0.9, 0.9, 500)]
    )
    pts = local @ geometry.rot_y(theta).T
    yaw, ok = init.init_orientation(pts, np.zeros(3), dynamic=False)
    assert ok
    err = abs((yaw - theta + math.pi / 2) % math.pi - math.pi / 2)
    assert math.degrees(err) < 5.0


def test_init_orientation_degenerate():
    rng = np.random.default_rng(18)
    pts = rng.normal(0, 0.5, (200, 3))  # isotropic: no principal direction
    yaw, ok = init.init_orientation(pts, np.zeros(3), dynamic=False)
    assert not ok and yaw == 0.0


def test_init_orientation_camera_facing_flip():
    rng = np.random.default_rng(19)
    local = np.column_stack(
        [rng.uniform(-2.0, 2.0, 300), rng.uniform(-0.7, 0.7, 300), rng.uniform(-0.9, 0.9, 300)]
    )
    view = np.array([0.0, 0.0, 1.0])
    yaw, ok = init.init_orientation(local, np.zeros(3), dynamic=False, view_dir=view)
    assert ok
    heading = np.array([math.cos(yaw), math.sin(yaw)])
    assert np.dot(heading, [view[0], view[2]]) <= 0.0
