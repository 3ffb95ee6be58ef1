"""The four-term autolabeling objective plus the confidence-weighted box loss
used by downstream detector training.

All loss functions return taped scalars when given taped scene parameters.
`total_loss` applies the warm-up gating: before `warmup_iters` the silhouette
term renders boxes-only geometry and the Eikonal term regularizes nothing
(residual mode) or the bare cuboid field (full mode).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fields, geometry, grad, renderer
from .grad import value_of

PROB_CLAMP = 1e-7


class LossComputationError(RuntimeError):
    """Raised when a loss term produces a non-finite value."""


@dataclass
class InitPrior:
    """Per-instance initialization targets for the regularization term."""

    locations: np.ndarray     # (N, 3)
    velocities: np.ndarray    # (N, 3)
    loc_valid: np.ndarray     # (N,) bool
    vel_valid: np.ndarray     # (N,) bool

    @staticmethod
    def empty(n):
        return InitPrior(
            locations=np.zeros((n, 3)),
            velocities=np.zeros((n, 3)),
            loc_valid=np.zeros(n, dtype=bool),
            vel_valid=np.zeros(n, dtype=bool),
        )


_CORNER_SIGNS_T = geometry._CORNER_SIGNS.T  # (3, 8)


def project_boxes_batch(params, frames, clip_to_image=True):
    """Project every (frame, instance) box in one taped pipeline.

    Returns (pred4, center_valid, truncated): pred4 holds (xmin, ymin, xmax,
    ymax) stacked to (F, N, 4); center_valid marks boxes whose shifted center
    is in front of the camera; truncated marks depth-clamped or image-clipped
    rectangles. Vertices behind the camera are slid to DEPTH_EPS so gradients
    stay finite.
    """
    n = params.n_instances
    n_frames = len(frames)
    rot = np.stack([f.rotation for f in frames])           # (F, 3, 3)
    trans = np.stack([f.translation for f in frames])      # (F, 3)
    dt = np.array([f.time - params.ref_time for f in frames])
    fx = np.array([f.K[0, 0] for f in frames])[:, None, None]
    fy = np.array([f.K[1, 1] for f in frames])[:, None, None]
    cx = np.array([f.K[0, 2] for f in frames])[:, None, None]
    cy = np.array([f.K[1, 2] for f in frames])[:, None, None]
    skew = np.array([f.K[0, 1] for f in frames])[:, None, None]
    wh = np.array([[f.width, f.height] for f in frames], dtype=np.float64)

    half = grad.mul(params.dims, 0.5)
    hx = grad.reshape(half[:, 0], (n, 1))
    hy = grad.reshape(half[:, 1], (n, 1))
    hz = grad.reshape(half[:, 2], (n, 1))
    sxs, sys, szs = (_CORNER_SIGNS_T[i][None, :] for i in range(3))  # (1, 8)
    bx = grad.mul(hx, sxs)
    by = grad.mul(hy, sys)
    bz = grad.mul(hz, szs)
    c = grad.reshape(grad.cos(params.yaws), (n, 1))
    s = grad.reshape(grad.sin(params.yaws), (n, 1))
    rx = grad.sub(grad.mul(c, bx), grad.mul(s, bz))   # (N, 8) box->world rotation
    rz = grad.add(grad.mul(s, bx), grad.mul(c, bz))

    gate = params.dynamic.astype(np.float64)[None, :, None]          # (1, N, 1)
    shift = grad.mul(grad.reshape(params.vels, (1, n, 3)), gate * dt[:, None, None])
    center = grad.add(grad.reshape(params.locs, (1, n, 3)), shift)   # (F, N, 3)

    wx = grad.add(grad.reshape(rx, (1, n, 8)), center[:, :, 0:1])
    wy = grad.add(grad.reshape(by, (1, n, 8)), center[:, :, 1:2])
    wz = grad.add(grad.reshape(rz, (1, n, 8)), center[:, :, 2:3])

    relx = grad.sub(wx, trans[:, None, 0:1])
    rely = grad.sub(wy, trans[:, None, 1:2])
    relz = grad.sub(wz, trans[:, None, 2:3])

    def rc(i, j):
        return rot[:, i, j][:, None, None]

    xc = grad.add(grad.add(grad.mul(relx, rc(0, 0)), grad.mul(rely, rc(1, 0))), grad.mul(relz, rc(2, 0)))
    yc = grad.add(grad.add(grad.mul(relx, rc(0, 1)), grad.mul(rely, rc(1, 1))), grad.mul(relz, rc(2, 1)))
    zc = grad.add(grad.add(grad.mul(relx, rc(0, 2)), grad.mul(rely, rc(1, 2))), grad.mul(relz, rc(2, 2)))

    center_rel = grad.value_of(center) - trans[:, None, :]
    center_z = np.einsum("fnk,fk->fn", center_rel, rot[:, :, 2])
    center_valid = center_z > geometry.DEPTH_EPS

    truncated = np.any(grad.value_of(zc) < geometry.DEPTH_EPS, axis=2)
    z = grad.maximum(zc, geometry.DEPTH_EPS)
    u = grad.add(grad.div(grad.add(grad.mul(xc, fx), grad.mul(yc, skew)), z), cx)
    v = grad.add(grad.div(grad.mul(yc, fy), z), cy)

    xmin = grad.amin(u, axis=2)
    xmax = grad.amax(u, axis=2)
    ymin = grad.amin(v, axis=2)
    ymax = grad.amax(v, axis=2)
    if clip_to_image:
        w_img = wh[:, 0][:, None]
        h_img = wh[:, 1][:, None]
        out_of_bounds = (
            (grad.value_of(xmin) < 0.0) | (grad.value_of(ymin) < 0.0)
            | (grad.value_of(xmax) > w_img) | (grad.value_of(ymax) > h_img)
        )
        truncated = truncated | out_of_bounds
        xmin = grad.minimum(grad.maximum(xmin, 0.0), w_img)
        xmax = grad.minimum(grad.maximum(xmax, 0.0), w_img)
        ymin = grad.minimum(grad.maximum(ymin, 0.0), h_img)
        ymax = grad.minimum(grad.maximum(ymax, 0.0), h_img)
    pred4 = grad.stack([xmin, ymin, xmax, ymax], axis=2)
    return pred4, center_valid, truncated


def _diou_batch(pred4, gt4):
    """Distance-IoU on (F, N, 4) rectangles (taped pred, constant gt)."""
    px1, py1, px2, py2 = (pred4[:, :, i] for i in range(4))
    gx1, gy1, gx2, gy2 = (gt4[..., i] for i in range(4))
    ix = grad.maximum(grad.sub(grad.minimum(px2, gx2), grad.maximum(px1, gx1)), 0.0)
    iy = grad.maximum(grad.sub(grad.minimum(py2, gy2), grad.maximum(py1, gy1)), 0.0)
    inter = grad.mul(ix, iy)
    area_p = grad.mul(grad.sub(px2, px1), grad.sub(py2, py1))
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = grad.maximum(grad.sub(grad.add(area_p, area_g), inter), 1e-12)
    iou = grad.div(inter, union)
    rho2 = grad.add(
        grad.power(grad.mul(grad.sub(grad.add(px1, px2), gx1 + gx2), 0.5), 2),
        grad.power(grad.mul(grad.sub(grad.add(py1, py2), gy1 + gy2), 0.5), 2),
    )
    ex = grad.sub(grad.maximum(px2, gx2), grad.minimum(px1, gx1))
    ey = grad.sub(grad.maximum(py2, gy2), grad.minimum(py1, gy1))
    c2 = grad.maximum(grad.add(grad.power(ex, 2), grad.power(ey, 2)), 1e-12)
    return grad.sub(iou, grad.div(rho2, c2))


def projection_loss(params, frames, gt_boxes2d, weights):
    """alpha * Huber(edge differences) - beta * DIoU, summed over source
    frames and instances.

    `gt_boxes2d[i][n]` is the ground-truth rectangle of instance n in frame i
    (already in scene instance order), or None when unavailable. Box edges
    are normalized by the image diagonal before the Huber penalty so the term
    is resolution independent. (frame, instance) pairs whose box center falls
    behind the camera are skipped and counted in the report.
    """
    n = params.n_instances
    n_frames = len(frames)
    gt4 = np.zeros((n_frames, n, 4))
    gt_ok = np.zeros((n_frames, n), dtype=bool)
    for fi in range(n_frames):
        for ni in range(n):
            gt = gt_boxes2d[fi][ni]
            if gt is None:
                continue
            gt4[fi, ni] = gt.as_array() if isinstance(gt, geometry.Box2D) else np.asarray(gt)
            gt_ok[fi, ni] = True

    pred4, center_valid, truncated = project_boxes_batch(params, frames)
    active = gt_ok & center_valid
    weight_mask = active.astype(np.float64)
    if weights.truncated_weight != 1.0:
        weight_mask = weight_mask * np.where(truncated, weights.truncated_weight, 1.0)

    diag = np.array([math.hypot(f.width, f.height) for f in frames])[:, None, None]
    edge_err = grad.div(grad.sub(pred4, gt4), diag)
    hub = grad.sumval(geometry.huber(edge_err, weights.huber_delta), axis=2)
    diou = _diou_batch(pred4, gt4)
    total = grad.sub(
        grad.mul(grad.sumval(grad.mul(hub, weight_mask)), weights.alpha),
        grad.mul(grad.sumval(grad.mul(diou, weight_mask)), weights.beta),
    )
    info = {
        "projection_terms": int(active.sum()),
        "projection_skipped": int(n_frames * n - active.sum()),
    }
    return total, info


def silhouette_loss(labels, background, gt_classes):
    """Mean cross-entropy between rendered soft labels and one-hot targets.

    `labels` is (N, R), `background` is (R,); `gt_classes` holds class indices
    in [0, N] with N the background class. Probabilities are clamped to
    [1e-7, 1 - 1e-7] before the log.
    """
    gt_classes = np.asarray(gt_classes)
    if gt_classes.size == 0:
        raise ValueError("silhouette_loss: empty ray batch")
    n_rays = gt_classes.shape[0]
    probs = grad.concat([labels, grad.reshape(background, (1, -1))], axis=0)
    probs = grad.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    logp = grad.log(probs)
    picked = logp[(gt_classes, np.arange(n_rays))]
    return grad.mul(grad.meanval(picked), -1.0)


def sample_eikonal_points(params, rng, weights, t=None):
    """Per-instance point clouds drawn uniformly inside each box inflated by
    `weights.eikonal_inflate` (sampling uses current parameter values)."""
    t = params.ref_time if t is None else t
    n = params.n_instances
    k_per = max(1, weights.eikonal_points // n)
    dims_v = value_of(params.dims)
    yaws_v = value_of(params.yaws)
    points = []
    for i in range(n):
        half = 0.5 * (1.0 + weights.eikonal_inflate) * dims_v[i]
        local = rng.uniform(-half, half, size=(k_per, 3))
        loc_t = value_of(params.location_at(i, t))
        points.append(local @ geometry.rot_y(float(yaws_v[i])).T + loc_t)
    return points


def eikonal_loss(params, rng, weights, t=None, use_rdf=True, points=None):
    """Mean squared deviation of the regularized field's spatial gradient
    norm from 1, over points sampled uniformly inside each instance's box
    inflated by `weights.eikonal_inflate` (or supplied per instance via
    `points`, e.g. for finite-difference checks with fixed quadrature).

    In "residual" mode the residual field alone is regularized (as
    published); in "full" mode the composed instance SDF is. With use_rdf
    False (warm-up), residual mode contributes zero and full mode regularizes
    the bare cuboid field.
    """
    t = params.ref_time if t is None else t
    n = params.n_instances
    if weights.eikonal_mode == "residual" and not use_rdf:
        return grad.mul(grad.sumval(grad.mul(params.locs, 0.0)), 0.0)
    if points is None:
        points = sample_eikonal_points(params, rng, weights, t)
    per_instance = []
    for i in range(n):
        pts = points[i]
        if weights.eikonal_mode == "residual":
            g = fields.residual_spatial_gradient(pts, i, t, params)
        elif use_rdf:
            g = fields.full_sdf_spatial_gradient(pts, i, t, params)
        else:
            _, g = geometry.cuboid_sdf_with_spatial_grad(
                pts, params.dims[i], params.location_at(i, t), params.yaws[i]
            )
        gn = grad.norm(g, axis=-1)
        per_instance.append(grad.meanval(grad.power(grad.sub(gn, 1.0), 2)))
    return grad.meanval(grad.stack(per_instance))


def init_reg_loss(params, prior):
    """Sum of Euclidean distances to the initialization targets; entries with
    invalid priors contribute nothing."""
    total = 0.0
    any_term = False
    for n in range(params.n_instances):
        if prior.loc_valid[n]:
            total = grad.add(total, grad.norm(grad.sub(params.locs[n], prior.locations[n])))
            any_term = True
        if prior.vel_valid[n]:
            total = grad.add(total, grad.norm(grad.sub(params.vels[n], prior.velocities[n])))
            any_term = True
    if not any_term:
        total = grad.mul(grad.sumval(grad.mul(params.locs, 0.0)), 0.0)
    return total


@dataclass
class LossBatch:
    """Everything one total_loss evaluation consumes besides the parameters."""

    frames: list                    # projection-loss source frames
    gt_boxes2d: list                # per frame, per instance Box2D or None
    ray_groups: list = None         # list of (RayBatch, frame time) tuples
    prior: InitPrior = None
    render_cfg: object = None
    sharpness: float = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    render_bounds: tuple = None     # pin (near, far), e.g. for gradient checks
    eikonal_pts: list = None        # pin per-instance eikonal quadrature points


def total_loss(params, batch, weights, iteration, warmup_iters=0):
    """Weighted sum of the four terms plus a per-term report.

    The report holds the weighted contributions; they sum to the total. A
    non-finite term raises LossComputationError naming the term.
    """
    in_warmup = iteration < warmup_iters
    use_rdf = not in_warmup
    report = {}

    terms = {}
    if weights.lambda_proj > 0.0:
        proj, proj_info = projection_loss(params, batch.frames, batch.gt_boxes2d, weights)
        terms["proj"] = grad.mul(proj, weights.lambda_proj)
        report.update(proj_info)
    if weights.lambda_slh > 0.0 and batch.ray_groups:
        label_parts = []
        bg_parts = []
        gt_parts = []
        for rays, ray_time in batch.ray_groups:
            if not len(rays):
                continue
            labels, background, _ = renderer.render_rays(
                rays.origins,
                rays.dirs,
                rays.times if rays.times is not None else ray_time,
                params,
                batch.render_cfg,
                batch.rng,
                use_rdf=use_rdf,
                sharpness=batch.sharpness,
                bounds=batch.render_bounds,
            )
            label_parts.append(labels)
            bg_parts.append(background)
            gt_parts.append(rays.labels)
        if gt_parts:
            all_labels = label_parts[0] if len(label_parts) == 1 else grad.concat(label_parts, axis=1)
            all_bg = bg_parts[0] if len(bg_parts) == 1 else grad.concat(bg_parts, axis=0)
            slh = silhouette_loss(all_labels, all_bg, np.concatenate(gt_parts))
            terms["slh"] = grad.mul(slh, weights.lambda_slh)
    if weights.lambda_eik > 0.0:
        eik = eikonal_loss(params, batch.rng, weights, t=params.ref_time, use_rdf=use_rdf,
                           points=batch.eikonal_pts)
        terms["eik"] = grad.mul(eik, weights.lambda_eik)
    if weights.lambda_init > 0.0 and batch.prior is not None:
        ini = init_reg_loss(params, batch.prior)
        terms["init"] = grad.mul(ini, weights.lambda_init)

    total = None
    for name, term in terms.items():
        val = float(value_of(term))
        if not np.isfinite(val):
            raise LossComputationError(f"loss term '{name}' is non-finite ({val})")
        report[name] = val
        total = term if total is None else grad.add(total, term)
    for name in ("proj", "slh", "eik", "init"):
        report.setdefault(name, 0.0)
    if total is None:
        total = grad.mul(grad.sumval(grad.mul(params.locs, 0.0)), 0.0)
    report["total"] = float(value_of(total))
    report["warmup"] = in_warmup
    return total, report


def smooth_l1_box_loss(pred, target):
    """Default per-box regression loss: smooth-L1 over the 7 static box
    parameters (dims, location, yaw)."""
    p = np.concatenate([pred.dims, pred.loc, [pred.yaw]])
    q = np.concatenate([target.dims, target.loc, [target.yaw]])
    return float(np.sum(value_of(geometry.huber(p - q, 1.0))))


def weighted_box_loss(pred_boxes, pseudo_boxes, confidences, assigner, box_loss=None):
    """Confidence-weighted regression loss for detector training: each
    prediction m is scored against pseudo label assigner[m] and scaled by that
    label's confidence. Linear in the confidence vector."""
    box_loss = box_loss or smooth_l1_box_loss
    confidences = np.asarray(confidences, dtype=np.float64)
    if np.any(confidences < 0.0) or np.any(confidences > 1.0):
        raise ValueError("confidences must lie in [0, 1]")
    total = 0.0
    for m, pred in enumerate(pred_boxes):
        j = assigner[m]
        if j < 0 or j >= len(pseudo_boxes):
            raise IndexError(f"assigner maps prediction {m} to invalid label {j}")
        total += float(confidences[j]) * box_loss(pred, pseudo_boxes[j])
    return total
