"""Closed-form geometric primitives.

Conventions, fixed repo-wide (see docs/FORMATS.md):
  * matrices are row-major; poses are stored camera-to-world
  * world axes follow the camera at identity pose: x right, y down
    (y is the vertical axis), z forward; yaw is the heading angle about y
  * rot_y(theta) maps the box x-axis to (cos theta, 0, sin theta), so a box
    with velocity (0, 0, v) heads at theta = pi/2
  * images are y-down; rays are cast through pixel centers (ix+0.5, iy+0.5)
  * box dims are (length, height, width) along the box (x, y, z) axes

Functions that participate in optimization (`cuboid_sdf_points`,
`project_box_params`, `iou2d`/`diou2d` on Box4 vectors, `huber`) accept either
numpy arrays or grad.Var and are differentiable through the grad module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import grad
from .grad import absolute, amax, amin, maximum, minimum, norm, stack, value_of

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Normalize an angle to (-pi, pi]."""
    t = (theta + math.pi) % TWO_PI - math.pi
    if t <= -math.pi:
        t += TWO_PI
    return t


@dataclass(frozen=True)
class InstanceBox:
    """10-DoF box: dims, center location at the reference time, yaw, velocity.

    `dynamic` gates the velocity: a static box never moves regardless of the
    stored velocity vector.
    """

    dims: np.ndarray
    loc: np.ndarray
    yaw: float
    vel: np.ndarray
    dynamic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dims", np.asarray(self.dims, dtype=np.float64))
        object.__setattr__(self, "loc", np.asarray(self.loc, dtype=np.float64))
        object.__setattr__(self, "vel", np.asarray(self.vel, dtype=np.float64))
        if np.any(self.dims <= 0.0):
            raise ValueError(f"box dims must be strictly positive, got {self.dims}")
        if not np.all(np.isfinite(self.vel)):
            raise ValueError("box velocity must be finite")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @staticmethod
    def static(dims, loc, yaw=0.0):
        return InstanceBox(dims=dims, loc=loc, yaw=yaw, vel=np.zeros(3), dynamic=False)

    def with_yaw(self, yaw):
        return replace(self, yaw=yaw)

    def location_at(self, t, t0=0.0):
        """Box center at time t: loc + dynamic * vel * (t - t0)."""
        if not self.dynamic:
            return self.loc.copy()
        return self.loc + self.vel * (t - t0)

    def corners(self, t=0.0, t0=0.0):
        """World coordinates of the 8 vertices at time t, shape (8, 3)."""
        half = 0.5 * self.dims
        signs = _CORNER_SIGNS * half
        return signs @ rot_y(self.yaw).T + self.location_at(t, t0)


_CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)]
)


@dataclass(frozen=True)
class CameraFrame:
    """One posed observation: intrinsics, camera-to-world pose, time, size."""

    K: np.ndarray
    rotation: np.ndarray  # camera-to-world, (3, 3)
    translation: np.ndarray  # camera origin in world, (3,)
    time: float
    width: int
    height: int
    frame_id: int = 0
    mask: np.ndarray = None  # (H, W) integer instance ids, 0 = background

    def __post_init__(self):
        object.__setattr__(self, "K", np.asarray(self.K, dtype=np.float64))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if self.K[1, 0] != 0.0 or self.K[2, 0] != 0.0 or self.K[2, 1] != 0.0:
            raise ValueError("intrinsics must be upper-triangular")
        if self.K[0, 0] <= 0.0 or self.K[1, 1] <= 0.0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError("pose rotation is not orthonormal")

    def world_to_cam(self, p):
        p = np.asarray(p, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def cam_to_world(self, p):
        p = np.asarray(p, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def pixel_rays(self, pixels):
        """Unit world-space rays through given integer pixel coords (R, 2)."""
        pixels = np.atleast_2d(pixels)
        uv1 = np.column_stack([pixels[:, 0] + 0.5, pixels[:, 1] + 0.5, np.ones(len(pixels))])
        dirs_cam = uv1 @ np.linalg.inv(self.K).T
        dirs_world = dirs_cam @ self.rotation.T
        dirs_world /= np.linalg.norm(dirs_world, axis=1, keepdims=True)
        origins = np.broadcast_to(self.translation, dirs_world.shape).copy()
        return origins, dirs_world


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            d = d / n
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned rectangle in continuous pixel coordinates."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float
    truncated: bool = False

    def __post_init__(self):
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise ValueError("degenerate Box2D: min > max")

    def as_array(self):
        return np.array([self.xmin, self.ymin, self.xmax, self.ymax])

    @property
    def area(self):
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


class BehindCameraError(ValueError):
    """Raised when a projection precondition (point/center in front) fails."""


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def rot_y(theta):
    """Rotation about the vertical (y) axis; maps x-hat to (cos t, 0, sin t)."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def rot_y_var(theta):
    """rot_y for a Var (or scalar) yaw, as a taped (3, 3) matrix."""
    c = grad.cos(theta)
    s = grad.sin(theta)
    one = np.float64(1.0)
    zero = np.float64(0.0)
    flat = stack([c, zero, -s, zero, one, zero, s, zero, c])
    return grad.reshape(flat, (3, 3))


# ---------------------------------------------------------------------------
# cuboid signed distance
# ---------------------------------------------------------------------------

def cuboid_sdf_points(points, dims, loc, yaw):
    """Exact signed distance from points (P, 3) to an oriented cuboid surface.

    Any of dims/loc/yaw may be a grad.Var; the result is then differentiable
    with respect to them. Points are always treated as constants here (use
    `cuboid_sdf_with_spatial_grad` when the spatial gradient is needed).
    """
    R = rot_y_var(yaw) if grad.is_var(yaw) else rot_y(float(value_of(yaw)))
    rel = grad.sub(points, loc)
    p_box = grad.matmul(rel, R)  # row-vector convention: p @ R == R^T p
    q = grad.sub(absolute(p_box), grad.mul(dims, 0.5))
    outside = norm(maximum(q, 0.0), axis=-1)
    inside = minimum(amax(q, axis=-1), 0.0)
    return grad.add(outside, inside)


def cuboid_sdf(p, box, t=0.0, t0=0.0):
    """Signed distance to `box` at time t for a single point or (P, 3) batch."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p[None, :] if single else p
    sdf = cuboid_sdf_points(pts, box.dims, box.location_at(t, t0), box.yaw)
    return float(sdf[0]) if single else sdf


def cuboid_sdf_multi(points, dims, locs, yaws, vels=None, dyn_gate=None, dt_points=None):
    """Signed distances of (P, 3) points to N cuboids at once, as (N, P).

    Same math as cuboid_sdf_points, written in per-component (N, P) arrays so
    all instances share one set of taped operations. When `dt_points` (P,) is
    given together with velocities and the dynamic gate, each box center is
    shifted by gate * vel * dt per point, which evaluates a batch mixing
    observation times (rays from several frames).
    """
    points = np.asarray(points, dtype=np.float64)
    px, py, pz = (points[:, i][None, :] for i in range(3))
    n = len(value_of(locs))
    col = lambda m, i: grad.reshape(m[:, i], (n, 1))
    rx = grad.sub(px, col(locs, 0))
    ry = grad.sub(py, col(locs, 1))
    rz = grad.sub(pz, col(locs, 2))
    if dt_points is not None and vels is not None and dyn_gate is not None and np.any(dyn_gate):
        gate = np.asarray(dyn_gate, dtype=np.float64).reshape(n, 1)
        dtp = np.asarray(dt_points, dtype=np.float64)[None, :]
        rx = grad.sub(rx, grad.mul(grad.mul(col(vels, 0), gate), dtp))
        ry = grad.sub(ry, grad.mul(grad.mul(col(vels, 1), gate), dtp))
        rz = grad.sub(rz, grad.mul(grad.mul(col(vels, 2), gate), dtp))
    c = grad.reshape(grad.cos(yaws), (n, 1))
    s = grad.reshape(grad.sin(yaws), (n, 1))
    bx = grad.add(grad.mul(rx, c), grad.mul(rz, s))      # box-frame coords
    bz = grad.sub(grad.mul(rz, c), grad.mul(rx, s))
    qx = grad.sub(absolute(bx), grad.mul(col(dims, 0), 0.5))
    qy = grad.sub(absolute(ry), grad.mul(col(dims, 1), 0.5))
    qz = grad.sub(absolute(bz), grad.mul(col(dims, 2), 0.5))
    ox = maximum(qx, 0.0)
    oy = maximum(qy, 0.0)
    oz = maximum(qz, 0.0)
    sq = grad.add(grad.add(grad.mul(ox, ox), grad.mul(oy, oy)), grad.mul(oz, oz))
    outside = grad.sqrt(grad.add(sq, 1e-24))
    inside = minimum(maximum(qx, maximum(qy, qz)), 0.0)
    return grad.add(outside, inside)


def cuboid_sdf_with_spatial_grad(points, dims, loc, yaw):
    """Cuboid SDF values and their world-space spatial gradients.

    The gradient is written out with taped ops (not a nested backward pass) so
    the result stays differentiable w.r.t. box parameters. Returns
    (sdf (P,), grad (P, 3)).
    """
    R = rot_y_var(yaw) if grad.is_var(yaw) else rot_y(float(value_of(yaw)))
    rel = grad.sub(points, loc)
    p_box = grad.matmul(rel, R)
    sgn = np.where(value_of(p_box) > 0.0, 1.0, -1.0)
    q = grad.sub(absolute(p_box), grad.mul(dims, 0.5))
    qpos = maximum(q, 0.0)
    outside = norm(qpos, axis=-1)
    max_q = amax(q, axis=-1)
    inside = minimum(max_q, 0.0)
    sdf = grad.add(outside, inside)

    # d(outside)/d p_box = qpos / ||qpos|| * sign(p_box); safe where qpos = 0.
    denom = grad.reshape(maximum(outside, 1e-12), (-1, 1))
    g_out = grad.mul(grad.div(qpos, denom), sgn)
    # d(inside)/d p_box: indicator of the argmax component, only when inside;
    # piecewise constant, so it enters the tape as a constant term.
    qv = value_of(q)
    arg = np.argmax(qv, axis=-1)
    onehot = np.zeros_like(qv)
    onehot[np.arange(len(arg)), arg] = 1.0
    inside_mask = (np.max(qv, axis=-1) < 0.0).astype(np.float64)[:, None]
    g_box = grad.add(g_out, onehot * inside_mask * sgn)
    # chain back to world coordinates: d p_box / d p = R^T -> grad_world = g_box @ R^T
    Rt = grad.reshape(R, (3, 3))
    g_world = grad.matmul(g_box, _transpose3(Rt))
    return sdf, g_world


def _transpose3(m):
    """Transpose of a (3, 3) Var/array via flat indexing (keeps the tape)."""
    if not grad.is_var(m):
        return np.asarray(m).T
    flat = grad.reshape(m, (9,))
    return grad.reshape(flat[np.array([0, 3, 6, 1, 4, 7, 2, 5, 8])], (3, 3))


def cuboid_sdf_brute_force(p, box, t=0.0, t0=0.0, n_per_edge=160):
    """Oracle: min distance to a dense surface sample, signed by an inside test."""
    p = np.asarray(p, dtype=np.float64)
    half = 0.5 * box.dims
    lin = [np.linspace(-h, h, n_per_edge) for h in half]
    faces = []
    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        uu, vv = np.meshgrid(lin[u_ax], lin[v_ax], indexing="ij")
        for sgn in (-1.0, 1.0):
            pts = np.zeros((uu.size, 3))
            pts[:, axis] = sgn * half[axis]
            pts[:, u_ax] = uu.ravel()
            pts[:, v_ax] = vv.ravel()
            faces.append(pts)
    surface = np.concatenate(faces, axis=0)
    R = rot_y(box.yaw)
    world = surface @ R.T + box.location_at(t, t0)
    dist = np.min(np.linalg.norm(world - p, axis=1))
    p_box = (p - box.location_at(t, t0)) @ R
    inside = np.all(np.abs(p_box) <= half)
    return -dist if inside else dist


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project_point(frame, p):
    """Pinhole projection of a world point. Returns ((u, v), depth).

    Raises BehindCameraError for points at or behind the camera plane.
    """
    pc = frame.world_to_cam(p)
    if pc[2] <= 0.0:
        raise BehindCameraError(f"point has camera depth {pc[2]:.6g} <= 0")
    uvw = frame.K @ pc
    return np.array([uvw[0] / uvw[2], uvw[1] / uvw[2]]), float(pc[2])


def unproject_pixel(frame, u, v, depth):
    """Inverse of project_point at the given camera depth."""
    d = np.linalg.inv(frame.K) @ np.array([u, v, 1.0])
    return frame.cam_to_world(d * depth)


DEPTH_EPS = 1e-3


def project_box_params(frame, dims, loc, yaw, vel=None, dynamic=0.0, dt=0.0, clip_to_image=True):
    """Project a (possibly Var-parameterized) box into an image rectangle.

    Vertices are shifted by dynamic * vel * dt, transformed to the camera,
    depth-clamped at DEPTH_EPS (behind-camera vertices slide to a small
    positive depth so gradients stay finite), projected, and enclosed in an
    axis-aligned rectangle optionally clipped to the image bounds.

    Returns (box4, truncated) where box4 is a taped/plain length-4 vector
    (xmin, ymin, xmax, ymax) and truncated is a plain bool.

    Raises BehindCameraError if the shifted box center is not in front of the
    camera.
    """
    half = grad.mul(dims, 0.5)
    corners_box = grad.mul(_CORNER_SIGNS, half)  # (8, 3)
    R = rot_y_var(yaw) if grad.is_var(yaw) else rot_y(float(value_of(yaw)))
    center = loc
    if vel is not None and dt != 0.0:
        center = grad.add(loc, grad.mul(vel, float(dynamic) * float(dt)))
    corners_world = grad.add(grad.matmul(corners_box, _transpose3(R)), center)

    cam_R = frame.rotation  # camera-to-world; world->cam multiplies by R on the right
    corners_cam = grad.matmul(grad.sub(corners_world, frame.translation), cam_R)

    center_z = float((value_of(center) - frame.translation) @ cam_R[:, 2])
    if center_z <= 0.0:
        raise BehindCameraError(f"box center at camera depth {center_z:.6g} <= 0")

    z_raw = corners_cam[:, 2]
    truncated = bool(np.any(value_of(z_raw) < DEPTH_EPS))
    z = maximum(z_raw, DEPTH_EPS)
    fx, fy = frame.K[0, 0], frame.K[1, 1]
    cx, cy = frame.K[0, 2], frame.K[1, 2]
    skew = frame.K[0, 1]
    x, y = corners_cam[:, 0], corners_cam[:, 1]
    u = grad.add(grad.div(grad.add(grad.mul(x, fx), grad.mul(y, skew)), z), cx)
    v = grad.add(grad.div(grad.mul(y, fy), z), cy)

    xmin = amin(u, axis=0)
    xmax = amax(u, axis=0)
    ymin = amin(v, axis=0)
    ymax = amax(v, axis=0)
    if clip_to_image:
        if (
            float(value_of(xmax)) < 0.0
            or float(value_of(xmin)) > frame.width
            or float(value_of(ymax)) < 0.0
            or float(value_of(ymin)) > frame.height
        ):
            truncated = True
        out_of_bounds = (
            float(value_of(xmin)) < 0.0
            or float(value_of(ymin)) < 0.0
            or float(value_of(xmax)) > frame.width
            or float(value_of(ymax)) > frame.height
        )
        truncated = truncated or out_of_bounds
        xmin = minimum(maximum(xmin, 0.0), float(frame.width))
        xmax = minimum(maximum(xmax, 0.0), float(frame.width))
        ymin = minimum(maximum(ymin, 0.0), float(frame.height))
        ymax = minimum(maximum(ymax, 0.0), float(frame.height))
    box4 = stack([xmin, ymin, xmax, ymax])
    return box4, truncated


def project_box(box, frame, t0=0.0, clip_to_image=True):
    """Box2D of a plain InstanceBox in `frame` (velocity-shifted to frame.time)."""
    dt = frame.time - t0
    box4, truncated = project_box_params(
        frame,
        box.dims,
        box.loc,
        box.yaw,
        vel=box.vel,
        dynamic=1.0 if box.dynamic else 0.0,
        dt=dt,
        clip_to_image=clip_to_image,
    )
    b = value_of(box4)
    return Box2D(float(b[0]), float(b[1]), float(b[2]), float(b[3]), truncated=truncated)


# ---------------------------------------------------------------------------
# overlap measures
# ---------------------------------------------------------------------------

def _box4(b):
    if isinstance(b, Box2D):
        return b.as_array()
    return b


def iou2d(a, b):
    """Intersection over union of two axis-aligned rectangles, in [0, 1]."""
    a = _box4(a)
    b = _box4(b)
    ix = maximum(minimum(a[2], b[2]) - maximum(a[0], b[0]), 0.0)
    iy = maximum(minimum(a[3], b[3]) - maximum(a[1], b[1]), 0.0)
    inter = grad.mul(ix, iy)
    area_a = grad.mul(grad.sub(a[2], a[0]), grad.sub(a[3], a[1]))
    area_b = grad.mul(grad.sub(b[2], b[0]), grad.sub(b[3], b[1]))
    union = grad.sub(grad.add(area_a, area_b), inter)
    if float(value_of(union)) <= 0.0:
        # Two empty boxes: defined as 0.
        return grad.mul(inter, 0.0)
    return grad.div(inter, union)


def diou2d(a, b):
    """Distance-IoU: IoU minus squared center distance over the enclosing
    rectangle's squared diagonal. In [-1, 1]; equals iou2d iff centers match."""
    a = _box4(a)
    b = _box4(b)
    iou = iou2d(a, b)
    acx = grad.mul(grad.add(a[0], a[2]), 0.5)
    acy = grad.mul(grad.add(a[1], a[3]), 0.5)
    bcx = grad.mul(grad.add(b[0], b[2]), 0.5)
    bcy = grad.mul(grad.add(b[1], b[3]), 0.5)
    rho2 = grad.add(grad.power(grad.sub(acx, bcx), 2), grad.power(grad.sub(acy, bcy), 2))
    ex = grad.sub(maximum(a[2], b[2]), minimum(a[0], b[0]))
    ey = grad.sub(maximum(a[3], b[3]), minimum(a[1], b[1]))
    c2 = grad.add(grad.power(ex, 2), grad.power(ey, 2))
    if float(value_of(c2)) <= 1e-12:
        return iou
    return grad.sub(iou, grad.div(rho2, c2))


def huber(x, delta=1.0):
    """Huber penalty: 0.5 x^2 inside |x| <= delta, linear outside.

    Differentiable composition: 0.5*min(|x|, d)^2 + d*max(|x| - d, 0).
    """
    if delta <= 0.0:
        raise ValueError("huber: delta must be positive")
    ax = absolute(x)
    quad = grad.mul(grad.power(minimum(ax, delta), 2), 0.5)
    lin = grad.mul(maximum(grad.sub(ax, delta), 0.0), delta)
    return grad.add(quad, lin)


# ---- BEV polygon machinery for 3D IoU -------------------------------------

def _bev_rect(box, t, t0):
    """Counter-clockwise (x, z) rectangle corners of a yaw-only box."""
    c = box.location_at(t, t0)
    dx, _, dz = 0.5 * box.dims
    cos_t, sin_t = math.cos(box.yaw), math.sin(box.yaw)
    # box x-axis -> (cos, sin), box z-axis -> (-sin, cos) in the (x, z) plane
    ax = np.array([cos_t, sin_t])
    az = np.array([-sin_t, cos_t])
    center = np.array([c[0], c[2]])
    return [center + sx * dx * ax + sz * dz * az for sx, sz in ((-1, -1), (1, -1), (1, 1), (-1, 1))]


def polygon_clip(subject, clip_poly):
    """Sutherland-Hodgman clip of `subject` by convex CCW `clip_poly`."""
    output = list(subject)
    cp1 = clip_poly[-1]
    for cp2 in clip_poly:
        if not output:
            return []
        input_list = output
        output = []
        s = input_list[-1]
        for e in input_list:
            e_in = (cp2[0] - cp1[0]) * (e[1] - cp1[1]) - (cp2[1] - cp1[1]) * (e[0] - cp1[0]) >= 0.0
            s_in = (cp2[0] - cp1[0]) * (s[1] - cp1[1]) - (cp2[1] - cp1[1]) * (s[0] - cp1[0]) >= 0.0
            if e_in:
                if not s_in:
                    output.append(_segment_intersection(cp1, cp2, s, e))
                output.append(e)
            elif s_in:
                output.append(_segment_intersection(cp1, cp2, s, e))
            s = e
        cp1 = cp2
    return output


def _segment_intersection(cp1, cp2, s, e):
    dc = (cp1[0] - cp2[0], cp1[1] - cp2[1])
    dp = (s[0] - e[0], s[1] - e[1])
    n1 = cp1[0] * cp2[1] - cp1[1] * cp2[0]
    n2 = s[0] * e[1] - s[1] * e[0]
    n3 = dc[0] * dp[1] - dc[1] * dp[0]
    return np.array([(n1 * dp[0] - n2 * dc[0]) / n3, (n1 * dp[1] - n2 * dc[1]) / n3])


def polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    pts = np.asarray(poly)
    x, z = pts[:, 0], pts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(z, 1)) - np.dot(z, np.roll(x, 1)))


def iou3d(a, b, t=0.0, t0=0.0):
    """3D IoU of two yaw-only boxes: BEV polygon overlap x vertical overlap."""
    ra = _bev_rect(a, t, t0)
    rb = _bev_rect(b, t, t0)
    inter_poly = polygon_clip(ra, rb)
    inter_area = polygon_area(inter_poly)
    ca = a.location_at(t, t0)
    cb = b.location_at(t, t0)
    ya0, ya1 = ca[1] - 0.5 * a.dims[1], ca[1] + 0.5 * a.dims[1]
    yb0, yb1 = cb[1] - 0.5 * b.dims[1], cb[1] + 0.5 * b.dims[1]
    h = max(0.0, min(ya1, yb1) - max(ya0, yb0))
    inter_vol = inter_area * h
    vol_a = float(np.prod(a.dims))
    vol_b = float(np.prod(b.dims))
    union = vol_a + vol_b - inter_vol
    if union <= 0.0:
        return 0.0
    return float(np.clip(inter_vol / union, 0.0, 1.0))
