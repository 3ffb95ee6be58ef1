"""End-to-end optimization of one target frame: source-frame selection,
initialization, the warm-up and joint phases of the 3000-iteration loop,
confidence assignment, and pseudo-label emission."""

from __future__ import annotations

import time as time_mod
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import fields, geometry, grad, initialization, losses, matching, renderer
from .config import RunConfig
from .grad import value_of
from .losses import InitPrior, LossComputationError


@dataclass
class RunManifest:
    """Reproducibility record for one optimize_target call."""

    seed: int
    target_frame_id: int
    config_lines: list
    instance_ids: list
    source_frame_ids: list
    init_lines: list = field(default_factory=list)
    loss_lines: list = field(default_factory=list)
    events: list = field(default_factory=list)
    final_lines: list = field(default_factory=list)
    wall_clock_s: float = 0.0

    def to_text(self):
        parts = [
            "# autobox3d run manifest v1",
            f"seed = {self.seed}",
            f"target_frame = {self.target_frame_id}",
            f"instance_ids = {','.join(str(i) for i in self.instance_ids)}",
            f"source_frames = {','.join(str(i) for i in self.source_frame_ids)}",
            f"wall_clock_s = {self.wall_clock_s:.9g}",
            "[config]",
            *self.config_lines,
            "[init]",
            *self.init_lines,
            "[events]",
            *self.events,
            "[loss]",
            *self.loss_lines,
            "[final]",
            *self.final_lines,
        ]
        return "\n".join(parts) + "\n"


def select_source_frames(frames, target_frame_id, n, instance_ids=None):
    """The n frames nearest in time to the target (symmetric when possible),
    excluding the target itself and frames where every instance mask is
    empty. Falls back to all usable frames with a warning when fewer than n
    remain."""
    target = next(f for f in frames if f.frame_id == target_frame_id)
    usable = []
    for f in frames:
        if f.frame_id == target_frame_id:
            continue
        if f.mask is not None and instance_ids is not None:
            if not np.any(np.isin(f.mask, np.asarray(instance_ids, dtype=f.mask.dtype))):
                continue
        usable.append(f)
    usable.sort(key=lambda f: (abs(f.time - target.time), f.frame_id))
    if len(usable) < n:
        warnings.warn(
            f"only {len(usable)} usable source frames for target {target_frame_id} (wanted {n})"
        )
        chosen = usable
    else:
        chosen = usable[:n]
    return sorted(f.frame_id for f in chosen)


def mask_boxes2d(mask, instance_ids, width, height):
    """Tight continuous-pixel bounding boxes of each instance id in a mask."""
    out = []
    for iid in instance_ids:
        ys, xs = np.nonzero(mask == iid)
        if len(xs) == 0:
            out.append(None)
            continue
        out.append(
            geometry.Box2D(float(xs.min()), float(ys.min()), float(xs.max() + 1.0), float(ys.max() + 1.0))
        )
    return out


def _fallback_location(frame, iid, depth_default):
    """Back-project the mask centroid of `iid` to a default depth."""
    ys, xs = np.nonzero(frame.mask == iid)
    if len(xs) == 0:
        center = np.array([frame.width / 2.0, frame.height / 2.0])
    else:
        center = np.array([xs.mean() + 0.5, ys.mean() + 0.5])
    return geometry.unproject_pixel(frame, center[0], center[1], depth_default)


def _initialize(dataset, target_frame, instance_ids, frame_ids, cfg, initial_boxes):
    """Initial boxes plus the regularization prior and manifest lines."""
    n = len(instance_ids)
    init_lines = []
    prior = InitPrior.empty(n)
    if initial_boxes is not None:
        boxes = [b for b in initial_boxes]
        for i, b in enumerate(boxes):
            prior.locations[i] = b.loc
            prior.velocities[i] = b.vel
            prior.loc_valid[i] = True
            prior.vel_valid[i] = True
            init_lines.append(f"instance {instance_ids[i]}: provided initial box")
        return boxes, prior, init_lines

    prior_dims = np.asarray(cfg.init.prior_dims, dtype=np.float64)
    use_depth = cfg.init_enabled and dataset.has_depth()
    frames = [dataset.frames[fid] for fid in frame_ids]
    depths = dataset.depths(frame_ids) if use_depth else {}

    boxes = []
    for i, iid in enumerate(instance_ids):
        if use_depth:
            result, clouds = initialization.initialize_instance(
                frames, depths, iid, target_frame, cfg.init
            )
        else:
            result = None
        if result is not None and result.loc_valid:
            loc = result.location
            vel = result.velocity if (cfg.velocity_enabled and result.dynamic) else np.zeros(3)
            dynamic = bool(cfg.velocity_enabled and result.dynamic)
            yaw = result.yaw if result.yaw_valid else 0.0
            prior.locations[i] = loc
            prior.loc_valid[i] = True
            if result.vel_valid and cfg.velocity_enabled:
                prior.velocities[i] = vel
                prior.vel_valid[i] = True
            init_lines.append(
                f"instance {iid}: depth init loc=({loc[0]:.3f},{loc[1]:.3f},{loc[2]:.3f}) "
                f"speed={np.linalg.norm(vel):.3f} dynamic={dynamic} yaw_valid={result.yaw_valid}"
            )
        else:
            loc = _fallback_location(target_frame, iid, cfg.init.fallback_depth)
            vel = np.zeros(3)
            # Without priors the dynamic gate cannot be estimated; when
            # velocity modeling is on, leave it open so motion stays learnable.
            dynamic = bool(cfg.velocity_enabled)
            yaw = 0.0
            init_lines.append(f"instance {iid}: fallback init at depth {cfg.init.fallback_depth}")
        boxes.append(
            geometry.InstanceBox(dims=prior_dims.copy(), loc=loc, yaw=yaw, vel=vel, dynamic=dynamic)
        )
    return boxes, prior, init_lines


class _BoxLayout:
    """Flat layout of the box parameter group: dims, locs, yaws, vels."""

    def __init__(self, n):
        self.n = n
        self.dims = slice(0, 3 * n)
        self.locs = slice(3 * n, 6 * n)
        self.yaws = slice(6 * n, 7 * n)
        self.vels = slice(7 * n, 10 * n)
        self.size = 10 * n

    def pack(self, scene):
        return np.concatenate(
            [scene.dims.ravel(), scene.locs.ravel(), scene.yaws.ravel(), scene.vels.ravel()]
        )

    def unpack_into(self, flat, scene):
        n = self.n
        scene.dims = flat[self.dims].reshape(n, 3).copy()
        scene.locs = flat[self.locs].reshape(n, 3).copy()
        scene.yaws = flat[self.yaws].copy()
        scene.vels = flat[self.vels].reshape(n, 3).copy()

    def taped_params(self, leaf_var, scene):
        n = self.n
        return fields.SceneParams(
            dims=grad.reshape(leaf_var[self.dims], (n, 3)),
            locs=grad.reshape(leaf_var[self.locs], (n, 3)),
            yaws=leaf_var[self.yaws],
            vels=grad.reshape(leaf_var[self.vels], (n, 3)),
            dynamic=scene.dynamic,
            embeddings=None,  # filled by caller
            psi=None,
            ref_time=scene.ref_time,
            residual_spec=scene.residual_spec(),
            hyper_spec=scene.hyper_spec(),
            cfg=scene.cfg,
        )

    def vel_active_mask(self, scene, velocity_enabled):
        active = np.ones(self.size, dtype=bool)
        vel_mask = np.ones((self.n, 3), dtype=bool)
        if not velocity_enabled:
            vel_mask[:] = False
        else:
            vel_mask[~scene.dynamic] = False
        active[self.vels] = vel_mask.ravel()
        return active


def _optimize(scene, dataset, target_frame, source_ids, prior, cfg, attempt, lr_scale, manifest):
    """Inner optimization loop; raises on divergence so the caller can retry."""
    n = scene.n_instances
    layout = _BoxLayout(n)
    instance_ids = manifest.instance_ids
    source_frames = [dataset.frames[fid] for fid in source_ids]
    gt_boxes2d = [
        mask_boxes2d(f.mask, instance_ids, f.width, f.height) for f in source_frames
    ]

    boxes_vec = layout.pack(scene)
    emb_vec = scene.embeddings.ravel().copy()
    psi_vec = scene.psi.copy()
    g_boxes = grad.ParamGroup("boxes", boxes_vec, cfg.lr_boxes * lr_scale,
                              cfg.lr_boxes_final * lr_scale, cfg.total_iters)
    g_emb = grad.ParamGroup("embeddings", emb_vec, cfg.lr_embeddings * lr_scale,
                            cfg.lr_embeddings_final * lr_scale, cfg.total_iters)
    g_psi = grad.ParamGroup("hypernet", psi_vec, cfg.lr_hypernet * lr_scale,
                            cfg.lr_hypernet_final * lr_scale, cfg.total_iters)
    boxes_active = layout.vel_active_mask(scene, cfg.velocity_enabled)
    mask_indices = [
        renderer.build_mask_index(f, instance_ids, cfg.render) for f in source_frames
    ]

    embed_dim = scene.cfg.embed_dim
    k_frames = max(1, min(cfg.frames_per_iter, len(source_frames)))
    rays_per_frame = max(1, cfg.render.rays_per_iter // k_frames)
    ray_cfg = replace(cfg.render, rays_per_iter=rays_per_frame)
    for iteration in range(cfg.total_iters):
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, manifest.target_frame_id, attempt, iteration])
        )
        parts = []
        part_times = []
        for j in range(k_frames):
            frame_idx = (iteration * k_frames + j) % len(source_frames)
            frame = source_frames[frame_idx]
            parts.append(renderer.sample_rays(frame, instance_ids, ray_cfg, rng,
                                              index=mask_indices[frame_idx]))
            part_times.append(frame.time)
        merged = renderer.merge_ray_batches(parts, part_times) if len(parts) > 1 else parts[0]
        ray_groups = [(merged, part_times[0])]

        boxes_leaf = grad.leaf(g_boxes.values)
        emb_leaf = grad.leaf(g_emb.values)
        psi_leaf = grad.leaf(g_psi.values)
        params = layout.taped_params(boxes_leaf, scene)
        params.embeddings = grad.reshape(emb_leaf, (n, embed_dim))
        params.psi = psi_leaf

        batch = losses.LossBatch(
            frames=source_frames,
            gt_boxes2d=gt_boxes2d,
            ray_groups=ray_groups,
            prior=prior,
            render_cfg=cfg.render,
            sharpness=cfg.render.sharpness_at(iteration),
            rng=rng,
        )
        loss, report = losses.total_loss(params, batch, cfg.loss, iteration, cfg.warmup_iters)
        grads = grad.backward(loss, [boxes_leaf, emb_leaf, psi_leaf])
        grads = grad.clip_global_norm(grads, cfg.grad_clip)
        grads[0][~boxes_active] = 0.0

        g_boxes.values = grad.adam_step(
            g_boxes.adam, g_boxes.values, grads[0], g_boxes.lr(iteration), active=boxes_active
        )
        if iteration >= cfg.warmup_iters:
            g_emb.values = grad.adam_step(g_emb.adam, g_emb.values, grads[1], g_emb.lr(iteration))
            g_psi.values = grad.adam_step(g_psi.adam, g_psi.values, grads[2], g_psi.lr(iteration))

        # projected-gradient box constraints
        dims_flat = g_boxes.values[layout.dims].reshape(n, 3)
        np.maximum(dims_flat, cfg.min_dim, out=dims_flat)
        yaws = g_boxes.values[layout.yaws]
        g_boxes.values[layout.yaws] = np.array([geometry.wrap_angle(y) for y in yaws])

        if cfg.log_every and iteration % cfg.log_every == 0:
            manifest.loss_lines.append(
                f"iter={iteration} proj={report['proj']:.9g} slh={report['slh']:.9g} "
                f"eik={report['eik']:.9g} init={report['init']:.9g} total={report['total']:.9g}"
            )

    layout.unpack_into(g_boxes.values, scene)
    scene.embeddings = g_emb.values.reshape(n, embed_dim).copy()
    scene.psi = g_psi.values.copy()
    return scene


def optimize_target(dataset, target_frame_id, cfg=None, initial_boxes=None):
    """Optimize all instances of one target frame; returns (labels, manifest).

    When depth maps are available (and cfg.init_enabled) the initializer runs
    the depth-to-cloud pipeline; otherwise boxes fall back to mask-centroid
    back-projection. Divergence triggers one restart at halved learning rates;
    a second failure emits the initialization boxes with confidence 0.
    """
    from .config import config_to_lines  # local import avoids a cycle at module load

    cfg = cfg or RunConfig()
    t_start = time_mod.perf_counter()
    target_frame = dataset.frames[target_frame_id]
    if target_frame.mask is None:
        raise ValueError("target frame has no instance mask")
    instance_ids = sorted(int(v) for v in np.unique(target_frame.mask) if v != 0)
    if not instance_ids:
        raise ValueError("target frame contains no instances")

    source_ids = select_source_frames(
        dataset.frames, target_frame_id, cfg.n_source_frames, instance_ids
    )
    manifest = RunManifest(
        seed=cfg.seed,
        target_frame_id=target_frame_id,
        config_lines=config_to_lines(cfg),
        instance_ids=instance_ids,
        source_frame_ids=source_ids,
    )

    init_frame_ids = sorted(set(source_ids) | {target_frame_id})
    init_boxes, prior, init_lines = _initialize(
        dataset, target_frame, instance_ids, init_frame_ids, cfg, initial_boxes
    )
    manifest.init_lines.extend(init_lines)

    scene = None
    for attempt, lr_scale in ((0, 1.0), (1, 0.5)):
        scene = fields.make_scene(init_boxes, ref_time=target_frame.time,
                                  cfg=cfg.fields, seed=cfg.seed)
        try:
            scene = _optimize(scene, dataset, target_frame, source_ids, prior, cfg,
                              attempt, lr_scale, manifest)
            break
        except (grad.GradError, LossComputationError, FloatingPointError) as err:
            manifest.events.append(f"attempt {attempt} diverged: {err}")
            manifest.loss_lines.append(f"# attempt {attempt} aborted")
            scene = None
    if scene is None:
        manifest.events.append("optimization failed twice; emitting init boxes with confidence 0")
        final_boxes = init_boxes
        confidences = np.zeros(len(init_boxes))
    else:
        final_boxes = scene.boxes()
        confidences = _assign_confidence(dataset, final_boxes, instance_ids, source_ids,
                                         target_frame, cfg, manifest)

    labels = [
        matching.PseudoLabel(
            box=box, confidence=float(confidences[i]),
            frame_id=target_frame_id, instance_id=instance_ids[i],
        )
        for i, box in enumerate(final_boxes)
    ]
    for lab in labels:
        b = lab.box
        manifest.final_lines.append(
            f"instance {lab.instance_id}: dims=({b.dims[0]:.9g},{b.dims[1]:.9g},{b.dims[2]:.9g}) "
            f"loc=({b.loc[0]:.9g},{b.loc[1]:.9g},{b.loc[2]:.9g}) yaw={b.yaw:.9g} "
            f"vel=({b.vel[0]:.9g},{b.vel[1]:.9g},{b.vel[2]:.9g}) dynamic={int(b.dynamic)} "
            f"confidence={lab.confidence:.9g}"
        )
    elapsed = time_mod.perf_counter() - t_start
    manifest.wall_clock_s = 0.0 if cfg.deterministic else elapsed
    return labels, manifest


def _assign_confidence(dataset, final_boxes, instance_ids, source_ids, target_frame, cfg, manifest):
    source_frames = [dataset.frames[fid] for fid in source_ids]
    vis_ids = matching.visible_source_frames(
        source_frames, instance_ids, min_px=cfg.init.visibility_min_px,
        target_frame_id=target_frame.frame_id,
    )
    vis_frames = [dataset.frames[fid] for fid in vis_ids]
    gt2d = [mask_boxes2d(f.mask, instance_ids, f.width, f.height) for f in vis_frames]
    q, info = matching.matching_costs(final_boxes, vis_frames, gt2d, t0=target_frame.time)
    assignment = matching.hungarian(q)
    conf = matching.confidence_scores(final_boxes, vis_frames, gt2d, assignment,
                                      t0=target_frame.time)
    manifest.events.append(
        f"confidence: frames={','.join(str(i) for i in vis_ids)} "
        f"match_cost={assignment.total_cost:.9g} skipped={info['pair_frames_skipped']}"
    )
    return conf
