"""3D attribute initialization from per-frame depth maps.

The depth-to-cloud pipeline runs, per frame and instance: erode the mask to
drop unreliable boundaries, optionally keep only pixels whose stereo warp
error is small, unproject masked depth into a world point cloud, then filter
by local density. Clouds then drive the velocity, dynamic-flag, location, and
orientation initializers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import geometry
from .config import InitConfig


@dataclass
class InstanceCloud:
    points: np.ndarray   # (M, 3) world coordinates
    instance_id: int
    frame_id: int
    time: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) and not np.all(np.isfinite(self.points)):
            raise ValueError("instance cloud contains non-finite points")

    @property
    def count(self):
        return len(self.points)

    @property
    def centroid(self):
        return self.points.mean(axis=0)


@dataclass
class InitResult:
    """Initial 10-DoF attributes plus validity flags for the regularizer."""

    location: np.ndarray
    velocity: np.ndarray
    yaw: float
    dynamic: bool
    loc_valid: bool
    vel_valid: bool
    yaw_valid: bool


@dataclass
class IcpResult:
    rotation: np.ndarray
    translation: np.ndarray
    rms: float
    n_iters: int
    degenerate: bool = False

    def apply(self, points):
        return points @ self.rotation.T + self.translation


def erode_mask(mask, k):
    """Binary erosion with a k x k square structuring element (k odd >= 1)."""
    if k < 1 or k % 2 == 0:
        raise ValueError("erosion kernel must be odd and >= 1")
    mask = np.asarray(mask).astype(bool)
    if k == 1:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=np.ones((k, k), dtype=bool))


def _bilinear(img, x, y):
    """Bilinear sample of img at float coords; returns (values, in_bounds).

    Coordinates exactly on the last row/column count as in bounds.
    """
    h, w = img.shape
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    inb = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x0c = np.clip(x0, 0, w - 2)
    y0c = np.clip(y0, 0, h - 2)
    fx = np.clip(x - x0c, 0.0, 1.0)
    fy = np.clip(y - y0c, 0.0, 1.0)
    v00 = img[y0c, x0c]
    v01 = img[y0c, x0c + 1]
    v10 = img[y0c + 1, x0c]
    v11 = img[y0c + 1, x0c + 1]
    val = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
    return val, inb


def warp_filter(left, right, depth, baseline, focal, eta1):
    """Validity mask from stereo photometric consistency.

    A pixel is kept when |left(u, v) - right(u - B*f/D, v)| <= eta1 with
    bilinear sampling of the right image; pixels whose warp lands out of
    bounds (or whose depth is invalid) are dropped. Without a right image the
    filter passes everything through with a warning (monocular mode).
    """
    left = np.asarray(left, dtype=np.float64)
    valid_depth = np.isfinite(depth) & (depth > 0.0)
    if right is None:
        warnings.warn("warp_filter: no right image; passing all pixels (monocular mode)")
        return valid_depth
    right = np.asarray(right, dtype=np.float64)
    h, w = left.shape
    ys, xs = np.mgrid[0:h, 0:w]
    disp = np.zeros_like(left)
    disp[valid_depth] = baseline * focal / depth[valid_depth]
    sampled, inb = _bilinear(right, (xs - disp).astype(np.float64), ys.astype(np.float64))
    err = np.abs(left - sampled)
    return valid_depth & inb & (err <= eta1)


def unproject(depth, mask, frame, instance_id=0):
    """World point cloud of all masked pixels with valid depth.

    Depth is the camera-z distance at each pixel center; rays go through
    (ix + 0.5, iy + 0.5).
    """
    mask = np.asarray(mask).astype(bool)
    valid = mask & np.isfinite(depth) & (depth > 0.0)
    ys, xs = np.nonzero(valid)
    if len(xs) == 0:
        return InstanceCloud(np.zeros((0, 3)), instance_id, frame.frame_id, frame.time)
    uv1 = np.column_stack([xs + 0.5, ys + 0.5, np.ones(len(xs))])
    dirs_cam = uv1 @ np.linalg.inv(frame.K).T  # z component is 1
    pts_cam = dirs_cam * depth[ys, xs][:, None]
    pts_world = frame.cam_to_world(pts_cam)
    return InstanceCloud(pts_world, instance_id, frame.frame_id, frame.time)


def density_filter(cloud, radius, eta2):
    """Keep points with at least eta2 neighbors (self excluded) within radius."""
    if radius <= 0.0:
        raise ValueError("density radius must be positive")
    if cloud.count == 0 or eta2 <= 0:
        return cloud
    tree = cKDTree(cloud.points)
    counts = tree.query_ball_point(cloud.points, r=radius, return_length=True) - 1
    keep = counts >= eta2
    return InstanceCloud(cloud.points[keep], cloud.instance_id, cloud.frame_id, cloud.time)


def _kabsch(src, dst):
    """Least-squares rigid transform src -> dst (rotation, translation)."""
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    h = (src - c_src).T @ (dst - c_dst)
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    flip = np.diag([1.0, 1.0, d])
    rot = vt.T @ flip @ u.T
    trans = c_dst - rot @ c_src
    degenerate = s[1] < 1e-9 * max(s[0], 1e-12)  # rank < 2: collinear cloud
    return rot, trans, degenerate


def icp_rigid(source, target, max_iters=50, tol=1e-10):
    """Iterative closest point: nearest-neighbor correspondences plus the
    closed-form rigid update, until the RMS improvement drops below tol."""
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) < 3 or len(dst) < 3:
        raise ValueError("icp_rigid: both clouds need at least 3 points")
    tree = cKDTree(dst)
    rot = np.eye(3)
    trans = np.zeros(3)
    moved = src.copy()
    prev_rms = np.inf
    degenerate = False
    n_done = 0
    for n_done in range(1, max_iters + 1):
        dists, idx = tree.query(moved)
        rms = float(np.sqrt(np.mean(dists**2)))
        rot_step, trans_step, degen = _kabsch(moved, dst[idx])
        degenerate = degenerate or degen
        moved = moved @ rot_step.T + trans_step
        rot = rot_step @ rot
        trans = rot_step @ trans + trans_step
        if abs(prev_rms - rms) < tol:
            break
        prev_rms = rms
    dists, _ = tree.query(moved)
    final_rms = float(np.sqrt(np.mean(dists**2)))
    return IcpResult(rotation=rot, translation=trans, rms=final_rms, n_iters=n_done, degenerate=degenerate)


def estimate_velocity(clouds, min_points=3):
    """Count-weighted constant-velocity estimate from consecutive clouds.

    For each adjacent pair the instantaneous velocity is the displacement of
    the earlier cloud's centroid under the ICP alignment onto the later
    cloud, divided by the time gap; pairs are weighted by the earlier cloud's
    point count. Returns (velocity (3,), valid).
    """
    usable = [c for c in sorted(clouds, key=lambda c: c.time) if c.count >= min_points]
    if len(usable) < 2:
        return np.zeros(3), False
    velocities = []
    weights = []
    for a, b in zip(usable[:-1], usable[1:]):
        dt = b.time - a.time
        if dt <= 0.0:
            continue
        try:
            icp = icp_rigid(a.points, b.points)
        except ValueError:
            continue
        c = a.centroid
        moved_c = icp.rotation @ c + icp.translation
        velocities.append((moved_c - c) / dt)
        weights.append(float(a.count))
    if not velocities:
        return np.zeros(3), False
    v = np.asarray(velocities)
    w = np.asarray(weights)
    return (v * w[:, None]).sum(axis=0) / w.sum(), True


def dynamic_mask(velocity, valid=True, threshold=0.03):
    """True when the initialized speed strictly exceeds the threshold; an
    invalid velocity conservatively maps to static."""
    if not valid:
        return False
    return bool(np.linalg.norm(velocity) > threshold)


def init_location(clouds, frame_time, velocity, vel_valid, min_points=100):
    """Box-center location at `frame_time`.

    Uses the centroid of that frame's cloud when it has at least `min_points`
    points; otherwise the nearest sufficiently dense frame's centroid (the
    densest nonempty frame as a last resort) propagated by the initialized
    velocity. Returns (location, valid).
    """
    nonempty = [c for c in clouds if c.count > 0]
    if not nonempty:
        return np.zeros(3), False
    at_frame = [c for c in nonempty if abs(c.time - frame_time) < 1e-9]
    if at_frame and at_frame[0].count >= min_points:
        return at_frame[0].centroid, True
    dense = [c for c in nonempty if c.count >= min_points]
    pool = dense if dense else [max(nonempty, key=lambda c: c.count)]
    adjacent = min(pool, key=lambda c: abs(c.time - frame_time))
    v = velocity if vel_valid else np.zeros(3)
    return adjacent.centroid + v * (frame_time - adjacent.time), True


def init_orientation(points, velocity, dynamic, view_dir=None, min_points=10):
    """Heading angle about the vertical axis.

    Dynamic instances head along their velocity. Static instances take the
    principal direction of the ground-plane (x, z) scatter, with the 180-degree
    ambiguity resolved so the heading faces the camera when `view_dir` (the
    camera-to-object direction) is given. Returns (yaw, valid).
    """
    if dynamic:
        vx, vz = velocity[0], velocity[2]
        if np.hypot(vx, vz) < 1e-12:
            return 0.0, False
        return float(np.arctan2(vz, vx)), True
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < min_points:
        return 0.0, False
    bev = pts[:, [0, 2]]
    cov = np.cov(bev.T)
    evals, evecs = np.linalg.eigh(cov)
    # near-isotropic scatter carries no orientation signal (cars are ~0.17)
    if evals[1] < 1e-12 or evals[0] / evals[1] > 0.6:
        return 0.0, False
    main = evecs[:, 1]  # largest eigenvalue last in eigh ordering
    yaw = float(np.arctan2(main[1], main[0]))
    if view_dir is not None:
        heading = np.array([np.cos(yaw), np.sin(yaw)])
        look = np.array([view_dir[0], view_dir[2]])
        if np.dot(heading, look) > 0.0:  # facing away from the camera: flip
            yaw = geometry.wrap_angle(yaw + np.pi)
    return yaw, True


def build_instance_cloud(frame, depth, instance_id, cfg, right_image=None,
                         left_image=None, baseline=0.0):
    """Depth-to-cloud pipeline for one instance in one frame: erode, warp
    filter (stereo only), unproject, density filter."""
    mask = frame.mask == instance_id
    mask = erode_mask(mask, cfg.erosion_k)
    if right_image is not None and left_image is not None:
        valid = warp_filter(left_image, right_image, depth, baseline, frame.K[0, 0], cfg.warp_eta1)
        mask = mask & valid
    cloud = unproject(depth, mask, frame, instance_id=instance_id)
    return density_filter(cloud, cfg.density_radius, cfg.density_eta2)


def initialize_instance(frames, depths, instance_id, target_frame, cfg):
    """Full initializer for one instance across the given frames.

    `depths` maps frame_id -> depth map (missing frames are skipped).
    Returns (InitResult, clouds).
    """
    clouds = []
    for frame in frames:
        depth = depths.get(frame.frame_id)
        if depth is None or frame.mask is None:
            continue
        clouds.append(build_instance_cloud(frame, depth, instance_id, cfg))

    velocity, vel_valid = estimate_velocity(clouds)
    dyn = dynamic_mask(velocity, vel_valid, cfg.dynamic_threshold)
    if not dyn:
        velocity = np.zeros(3)
    location, loc_valid = init_location(
        clouds, target_frame.time, velocity, vel_valid, cfg.min_points_location
    )

    target_cloud = max(clouds, key=lambda c: c.count, default=None)
    view_dir = None
    if loc_valid:
        ray = location - target_frame.translation
        n = np.linalg.norm(ray)
        if n > 1e-9:
            view_dir = ray / n
    yaw, yaw_valid = init_orientation(
        target_cloud.points if target_cloud is not None else np.zeros((0, 3)),
        velocity,
        dyn,
        view_dir=view_dir,
    )

    if loc_valid and cfg.center_offset and view_dir is not None:
        length, _, width = cfg.prior_dims
        if yaw_valid:
            heading = np.array([np.cos(yaw), 0.0, np.sin(yaw)])
            c = abs(float(np.dot(heading, view_dir)))
            offset = 0.5 * (length * c + width * np.sqrt(max(0.0, 1.0 - c * c)))
        else:
            offset = 0.5 * width
        location = location + view_dir * offset

    return (
        InitResult(
            location=location,
            velocity=velocity,
            yaw=yaw,
            dynamic=dyn,
            loc_valid=loc_valid,
            vel_valid=vel_valid,
            yaw_valid=yaw_valid,
        ),
        clouds,
    )
