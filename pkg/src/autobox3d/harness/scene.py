"""Synthetic multi-view scenes with exact geometric oracles.

A scene is a set of true boxes (some moving at constant velocity), a forward
camera trajectory with sinusoidal sway, and noise knobs (mask boundary
jitter, multiplicative depth noise, pose jitter). Instance masks and depth
maps are produced by exact ray/box intersection, so they serve as ground
truth for the renderer and the initialization pipeline.

Scene time starts at 0 (frame k is at k * frame_period); true box locations
are stored at t = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import geometry
from ..geometry import CameraFrame, InstanceBox

TEMPLATES = ("static-street", "mixed-traffic", "dynamic-heavy", "occlusion-stress")


@dataclass
class SceneSpec:
    instances: list                 # true InstanceBox, locations at t = 0
    positions: np.ndarray           # (F, 3) camera origins
    rotations: np.ndarray           # (F, 3, 3) camera-to-world
    times: np.ndarray               # (F,)
    K: np.ndarray
    width: int
    height: int
    seed: int
    template: str = "static-street"
    mask_noise_px: int = 0
    depth_noise_sigma: float = 0.0
    pose_jitter_t: float = 0.0      # meters
    pose_jitter_deg: float = 0.0
    ground_y: float = 1.55          # y-down world: ground plane below the camera

    @property
    def n_frames(self):
        return len(self.times)

    @property
    def n_instances(self):
        return len(self.instances)

    def frame(self, k, mask=None):
        return CameraFrame(
            K=self.K,
            rotation=self.rotations[k],
            translation=self.positions[k],
            time=float(self.times[k]),
            width=self.width,
            height=self.height,
            frame_id=k,
            mask=mask,
        )

    def jittered_poses(self, rng):
        """Stored-pose versions of the trajectory with small rigid errors."""
        positions = self.positions.copy()
        rotations = self.rotations.copy()
        if self.pose_jitter_t > 0.0 or self.pose_jitter_deg > 0.0:
            for k in range(self.n_frames):
                positions[k] = positions[k] + rng.normal(0.0, self.pose_jitter_t, 3)
                angle = math.radians(self.pose_jitter_deg)
                axis = rng.normal(size=3)
                axis /= np.linalg.norm(axis)
                theta = rng.normal(0.0, angle)
                rotations[k] = _axis_angle(axis, theta) @ rotations[k]
        return positions, rotations


def _axis_angle(axis, theta):
    kx, ky, kz = axis
    K = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * (K @ K)


# ---------------------------------------------------------------------------
# exact ray/box oracles
# ---------------------------------------------------------------------------

def oracle_ray_box_hit(ray, box, t=0.0, t0=0.0):
    """Exact entry distance of a ray into an oriented cuboid, or None.

    A ray starting inside the box has entry distance 0.
    """
    t_in, t_out = _slab_batch(ray.origin[None, :], ray.direction[None, :], box, t, t0)
    if t_out[0] < max(t_in[0], 0.0):
        return None
    return float(max(t_in[0], 0.0))


def _slab_batch(origins, dirs, box, t, t0):
    """Slab-method intersection for a batch of rays; returns (t_in, t_out)."""
    R = geometry.rot_y(box.yaw)
    c = box.location_at(t, t0)
    o = (origins - c) @ R
    d = dirs @ R
    half = 0.5 * box.dims
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    parallel = np.abs(d) < 1e-15
    inside_slab = np.abs(o) <= half
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), hi)
    return np.max(lo, axis=1), np.min(hi, axis=1)


def _frame_dirs(spec, k, stride=1):
    xs, ys = np.meshgrid(np.arange(0, spec.width, stride), np.arange(0, spec.height, stride))
    uv1 = np.stack([xs + 0.5, ys + 0.5, np.ones_like(xs, dtype=np.float64)], axis=-1)
    dirs_cam = uv1.reshape(-1, 3) @ np.linalg.inv(spec.K).T
    dirs_world = dirs_cam @ spec.rotations[k].T
    norms = np.linalg.norm(dirs_world, axis=1, keepdims=True)
    return dirs_world / norms, norms.ravel()


def render_frame_hits(spec, k, instances=None, stride=1):
    """Nearest-hit instance index (-1 = miss) and hit distance per pixel."""
    winner, best_t, _ = frame_hit_details(spec, k, instances=instances, stride=stride)
    return winner, best_t


def frame_hit_details(spec, k, instances=None, stride=1):
    """Per-pixel nearest-hit index (-1 = miss), hit distance, and the
    per-instance any-hit maps (occlusion ignored), all from one slab pass."""
    instances = spec.instances if instances is None else instances
    dirs, _ = _frame_dirs(spec, k, stride=stride)
    origins = np.broadcast_to(spec.positions[k], dirs.shape)
    t = float(spec.times[k])
    h = (spec.height + stride - 1) // stride
    w = (spec.width + stride - 1) // stride
    best_t = np.full(len(dirs), np.inf)
    best_i = np.full(len(dirs), -1, dtype=np.int64)
    solo = np.zeros((len(instances), len(dirs)), dtype=bool)
    for i, box in enumerate(instances):
        t_in, t_out = _slab_batch(origins, dirs, box, t, 0.0)
        entry = np.maximum(t_in, 0.0)
        hit = t_out >= entry
        solo[i] = hit
        better = hit & (entry < best_t)
        best_t[better] = entry[better]
        best_i[better] = i
    return (
        best_i.reshape(h, w),
        best_t.reshape(h, w),
        solo.reshape(len(instances), h, w),
    )


def render_gt_mask(spec, k, rng=None):
    """Instance-id mask (uint16, 0 = background) with optional boundary noise."""
    ids, _ = render_frame_hits(spec, k)
    mask = np.where(ids >= 0, ids + 1, 0).astype(np.uint16)
    if spec.mask_noise_px > 0:
        rng = rng or np.random.default_rng(spec.seed * 7919 + k)
        mask = _jitter_boundaries(mask, spec.mask_noise_px, rng)
    return mask


def _jitter_boundaries(mask, noise_px, rng):
    """Resample each pixel from a random offset <= noise_px; only pixels
    within noise_px of a label boundary can change."""
    h, w = mask.shape
    dy = rng.integers(-noise_px, noise_px + 1, size=(h, w))
    dx = rng.integers(-noise_px, noise_px + 1, size=(h, w))
    ys, xs = np.mgrid[0:h, 0:w]
    return mask[np.clip(ys + dy, 0, h - 1), np.clip(xs + dx, 0, w - 1)]


def render_gt_depth(spec, k, rng=None):
    """Camera-z depth of the nearest hit per pixel (0 = no hit), with
    optional multiplicative Gaussian noise."""
    ids, t_hit = render_frame_hits(spec, k)
    dirs, _ = _frame_dirs(spec, k)
    dz = (dirs @ spec.rotations[k][:, 2]).reshape(spec.height, spec.width)
    depth = np.where(np.isfinite(t_hit), t_hit * dz, 0.0)
    depth[ids < 0] = 0.0
    if spec.depth_noise_sigma > 0.0:
        rng = rng or np.random.default_rng(spec.seed * 6007 + k)
        noise = 1.0 + spec.depth_noise_sigma * rng.normal(size=depth.shape)
        depth = np.where(depth > 0.0, np.maximum(depth * noise, 0.05), 0.0)
    return depth.astype(np.float64)


def occlusion_fractions(spec, k, stride=1):
    """Per-instance 1 - visible/solo mask fraction in frame k (0 off-screen)."""
    winner, _, solo = frame_hit_details(spec, k, stride=stride)
    out = np.zeros(spec.n_instances)
    for i in range(spec.n_instances):
        solo_px = int(solo[i].sum())
        if solo_px == 0:
            continue
        out[i] = 1.0 - int((winner == i).sum()) / solo_px
    return out


def occlusion_fraction(spec, k, i):
    """1 - visible/solo mask area of instance i in frame k (0 if off-screen)."""
    return float(occlusion_fractions(spec, k)[i])


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

_CAR_DIMS = np.array([3.9, 1.56, 1.6])  # length, height, width


def _trajectory(n_frames, period=0.5, step=1.0, sway=0.4):
    times = np.arange(n_frames) * period
    z = np.arange(n_frames) * step
    x = sway * np.sin(np.linspace(0.0, 2.0 * math.pi, n_frames))
    positions = np.column_stack([x, np.zeros(n_frames), z])
    rotations = np.broadcast_to(np.eye(3), (n_frames, 3, 3)).copy()
    return positions, rotations, times


def _bev_overlap_fraction(a, b):
    """Intersection volume over the smaller box volume (at t = 0)."""
    poly = geometry.polygon_clip(geometry._bev_rect(a, 0.0, 0.0), geometry._bev_rect(b, 0.0, 0.0))
    inter_area = geometry.polygon_area(poly)
    ya = (a.loc[1] - 0.5 * a.dims[1], a.loc[1] + 0.5 * a.dims[1])
    yb = (b.loc[1] - 0.5 * b.dims[1], b.loc[1] + 0.5 * b.dims[1])
    h = max(0.0, min(ya[1], yb[1]) - max(yb[0], ya[0]))
    vol = inter_area * h
    return vol / min(np.prod(a.dims), np.prod(b.dims))


def _center_visible(spec_like, box, k, positions, rotations, times, K, width, height):
    c = box.location_at(float(times[k]), 0.0)
    pc = (c - positions[k]) @ rotations[k]
    if pc[2] <= 1.0:
        return False
    uvw = K @ pc
    u, v = uvw[0] / uvw[2], uvw[1] / uvw[2]
    return 0.0 <= u < width and 0.0 <= v < height


def generate_scene(template, seed, n_instances=8, n_frames=17, width=384, height=288,
                   focal=330.0, mask_noise_px=0, depth_noise_sigma=0.0,
                   pose_jitter_t=0.0, pose_jitter_deg=0.0):
    """Seeded random scene honoring the template's static:dynamic mix.

    mixed-traffic keeps a 4:1 static:dynamic ratio; dynamic-heavy flips the
    balance; occlusion-stress places static instances in occluding pairs and
    asserts that at least 30% of (frame, instance) pairs are >= 40% occluded.
    Draws violating placement constraints are resampled up to 100 times.
    """
    if template not in TEMPLATES:
        raise ValueError(f"unknown template {template!r}; choose from {TEMPLATES}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, TEMPLATES.index(template)]))
    positions, rotations, times = _trajectory(n_frames)
    K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
    ground_y = 1.55
    target_k = n_frames // 2
    t_target = float(times[target_k])
    cam_end_z = positions[-1, 2]

    if template == "static-street":
        n_dynamic = 0
    elif template == "mixed-traffic":
        n_dynamic = max(1, round(n_instances / 5))
    elif template == "dynamic-heavy":
        n_dynamic = max(1, round(0.7 * n_instances))
    else:
        n_dynamic = 0

    def make_spec(instances):
        return SceneSpec(
            instances=instances,
            positions=positions,
            rotations=rotations,
            times=times,
            K=K,
            width=width,
            height=height,
            seed=seed,
            template=template,
            mask_noise_px=mask_noise_px,
            depth_noise_sigma=depth_noise_sigma,
            pose_jitter_t=pose_jitter_t,
            pose_jitter_deg=pose_jitter_deg,
        )

    for attempt in range(20):
        try:
            if template == "occlusion-stress":
                instances = _place_occlusion_rows(rng, n_instances, cam_end_z, ground_y)
            else:
                instances = _place_traffic(
                    rng, n_instances, n_dynamic, cam_end_z, t_target,
                    positions, rotations, times, K, width, height, ground_y,
                )
                instances = _fix_target_visibility(
                    make_spec(instances), target_k, rng, n_dynamic, cam_end_z, t_target,
                    positions, rotations, times, K, width, height, ground_y,
                )
            spec = make_spec(instances)
            _validate_scene(spec, target_k)
            if template == "occlusion-stress":
                _assert_occlusion(spec)
            return spec
        except _PlacementError:
            continue
    raise RuntimeError(f"could not generate a valid {template} scene for seed {seed}")


class _PlacementError(RuntimeError):
    pass


def _random_dims(rng):
    return _CAR_DIMS * (1.0 + rng.uniform(-0.15, 0.15, size=3))


def _place_traffic(rng, n_instances, n_dynamic, cam_end_z, t_target,
                   positions, rotations, times, K, width, height, ground_y,
                   existing=None):
    instances = []
    placed = list(existing) if existing else []
    n_frames = len(times)
    for i in range(n_instances):
        dynamic = i < n_dynamic
        for _ in range(100):
            dims = _random_dims(rng)
            if dynamic:
                speed = rng.uniform(0.5, 2.5) * rng.choice([-1.0, 1.0])
                vel = np.array([rng.uniform(-0.15, 0.15), 0.0, speed])
                yaw = math.atan2(vel[2], vel[0])
                lane = rng.choice([-1.0, 1.0]) * rng.uniform(1.8, 5.0)
                z_at_target = rng.uniform(10.0, 24.0) + positions[len(times) // 2, 2]
                loc_t = np.array([lane, ground_y - 0.5 * dims[1], z_at_target])
                loc0 = loc_t - vel * t_target
            else:
                vel = np.zeros(3)
                side = rng.choice([-1.0, 1.0])
                x = side * rng.uniform(2.0, 7.5)
                z = rng.uniform(cam_end_z + 4.0, cam_end_z + 24.0)
                loc0 = np.array([x, ground_y - 0.5 * dims[1], z])
                if rng.random() < 0.25:
                    yaw = rng.uniform(-math.pi, math.pi)
                else:
                    yaw = rng.choice([math.pi / 2, -math.pi / 2]) + rng.uniform(-0.3, 0.3)
            box = InstanceBox(dims=dims, loc=loc0, yaw=yaw, vel=vel, dynamic=dynamic)
            visible = sum(
                _center_visible(None, box, k, positions, rotations, times, K, width, height)
                for k in range(n_frames)
            )
            if visible < max(3, int(0.7 * n_frames)):
                continue
            if any(_bev_overlap_fraction(box, other) > 0.10 for other in placed + instances):
                continue
            instances.append(box)
            break
        else:
            raise _PlacementError(f"no valid placement for instance {i}")
    return instances


def _place_occlusion_rows(rng, n_instances, cam_end_z, ground_y):
    """Parked rows: cars lined up behind each other at similar lateral offset,
    so each occludes the next for most of the trajectory."""
    instances = []
    per_row = (n_instances + 1) // 2
    for side in (-1.0, 1.0):
        row_x = side * rng.uniform(2.2, 3.2)
        z = cam_end_z + rng.uniform(3.0, 6.0)
        for _ in range(per_row):
            if len(instances) >= n_instances:
                break
            dims = _random_dims(rng)
            x = row_x + rng.uniform(-0.35, 0.35)
            loc = np.array([x, ground_y - 0.5 * dims[1], z + 0.5 * dims[0]])
            yaw = rng.choice([math.pi / 2, -math.pi / 2]) + rng.uniform(-0.12, 0.12)
            instances.append(InstanceBox.static(dims, loc, yaw))
            z += dims[0] + rng.uniform(0.8, 1.8)
    return instances


def _target_visible_counts(spec, target_k, stride=2):
    winner, _, _ = frame_hit_details(spec, target_k, stride=stride)
    return np.array([(winner == i).sum() for i in range(spec.n_instances)])


def _fix_target_visibility(spec, target_k, rng, n_dynamic, cam_end_z, t_target,
                           positions, rotations, times, K, width, height, ground_y,
                           min_px=10):
    """Re-place instances fully hidden in the target frame (mutual occlusion
    can hide an instance whose center projects fine)."""
    instances = list(spec.instances)
    for _ in range(40):
        counts = _target_visible_counts(spec, target_k)
        bad = [i for i, c in enumerate(counts) if c < min_px]
        if not bad:
            return instances
        for i in bad:
            others = [b for j, b in enumerate(instances) if j != i]
            replacement = _place_traffic(
                rng, 1, 1 if instances[i].dynamic else 0, cam_end_z, t_target,
                positions, rotations, times, K, width, height, ground_y,
                existing=others,
            )[0]
            instances[i] = replacement
        spec = SceneSpec(**{**spec.__dict__, "instances": instances})
    raise _PlacementError("could not make every instance visible in the target frame")


def _validate_scene(spec, target_k):
    for k in range(spec.n_frames):
        if not np.any(_target_visible_counts(spec, k, stride=4) > 0):
            raise _PlacementError(f"frame {k} sees no instance")
    if np.any(_target_visible_counts(spec, target_k) < 10):
        raise _PlacementError("not all instances visible in the target frame")


def _assert_occlusion(spec):
    total = spec.n_frames * spec.n_instances
    heavy = 0
    for k in range(spec.n_frames):
        heavy += int((occlusion_fractions(spec, k, stride=2) >= 0.40).sum())
    if heavy < 0.30 * total:
        raise _PlacementError(f"occlusion-stress scene too mild: {heavy}/{total}")
