"""Instance-aware volumetric silhouette rendering.

A ray batch is integrated in two passes: a plain-numpy coarse pass whose
weights drive inverse-CDF importance resampling, then a differentiable fine
pass over the merged samples. Per sample the scene SDF (min over instances)
produces surface-crossing alphas; the per-instance SDFs blend one-hot
instance labels through a softmin; compositing the blended labels yields one
soft label vector per ray plus a residual background weight.

Compositing uses w_i = T_i - T_{i+1} with T the running transmittance, so the
weights and the terminal transmittance sum to 1 by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import fields, grad
from .config import RenderConfig
from .fields import SceneParams
from .grad import value_of


@dataclass
class RenderedPixel:
    """Soft instance label per ray: labels (N,), background weight, and the
    per-sample compositing weights kept for debugging."""

    labels: np.ndarray
    background: float
    weights: np.ndarray = None
    ts: np.ndarray = None

    def __post_init__(self):
        if np.any(self.labels < -1e-9) or self.background < -1e-9:
            raise ValueError("rendered label components must be nonnegative")


@dataclass
class RayBatch:
    origins: np.ndarray    # (R, 3)
    dirs: np.ndarray       # (R, 3) unit
    labels: np.ndarray     # (R,) int in [0, N]; N = background class
    pixels: np.ndarray = None  # (R, 2) source pixel coords
    times: np.ndarray = None   # (R,) acquisition time per ray (multi-frame batches)

    def __len__(self):
        return len(self.origins)


def merge_ray_batches(batches, times):
    """Concatenate per-frame ray batches into one, tagging rays with their
    frame's acquisition time."""
    return RayBatch(
        origins=np.concatenate([b.origins for b in batches]),
        dirs=np.concatenate([b.dirs for b in batches]),
        labels=np.concatenate([b.labels for b in batches]),
        pixels=np.concatenate([b.pixels for b in batches]),
        times=np.concatenate([np.full(len(b), t) for b, t in zip(batches, times)]),
    )


def detach_params(params):
    """Numpy-valued copy of a SceneParams view (drops the tape)."""
    return SceneParams(
        dims=value_of(params.dims),
        locs=value_of(params.locs),
        yaws=value_of(params.yaws),
        vels=value_of(params.vels),
        dynamic=params.dynamic,
        embeddings=value_of(params.embeddings),
        psi=value_of(params.psi),
        ref_time=params.ref_time,
        residual_spec=params.residual_spec,
        hyper_spec=params.hyper_spec,
        cfg=params.cfg,
    )


def scene_near_far(params, t, cam_origin, cfg):
    """Frame-level integration bounds from the current box estimates. With an
    array of times the envelope over the earliest/latest time is used."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    dyn = params.dynamic.astype(np.float64)[:, None]
    diags = np.linalg.norm(value_of(params.dims), axis=1)
    far = 0.0
    for tv in (float(t_arr.min()), float(t_arr.max())):
        locs = value_of(params.locs) + dyn * value_of(params.vels) * (tv - params.ref_time)
        dists = np.linalg.norm(locs - np.asarray(cam_origin), axis=1)
        far = max(far, float(np.max(dists + diags)))
    far = min(max(far, cfg.far_min), cfg.far_max)
    return cfg.near, far


def stratified_samples(rng, near, far, n, n_rays=1, jitter=True):
    """One sample per stratum of [near, far]; strictly increasing per ray.

    With jitter disabled, samples sit at stratum midpoints.
    """
    if near >= far:
        raise ValueError("stratified_samples: near must be < far")
    edges = np.linspace(near, far, n + 1)
    lo, hi = edges[:-1], edges[1:]
    if jitter:
        u = rng.random((n_rays, n))
    else:
        u = np.full((n_rays, n), 0.5)
    return lo + u * (hi - lo)


def hierarchical_resample(coarse_ts, coarse_weights, n_fine, rng, near, far):
    """Inverse-CDF draws from the piecewise-constant coarse weight density,
    merged and sorted with the coarse samples.

    Rays whose coarse weights are all ~0 fall back to uniform draws over
    [near, far].
    """
    coarse_ts = np.atleast_2d(coarse_ts)
    w = np.maximum(np.atleast_2d(coarse_weights), 0.0)
    n_rays, n_bins = w.shape
    if coarse_ts.shape[1] != n_bins + 1:
        raise ValueError("hierarchical_resample: need len(ts) == len(weights) + 1")

    totals = w.sum(axis=1, keepdims=True)
    degenerate = totals[:, 0] < 1e-12
    pdf = np.where(degenerate[:, None], 1.0 / n_bins, w / np.where(totals > 0, totals, 1.0))
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    u = rng.random((n_rays, n_fine))
    # batched searchsorted: offset each row into its own unit interval
    offsets = 2.0 * np.arange(n_rays)[:, None]
    flat_idx = np.searchsorted((cdf + offsets).ravel(), (u + offsets).ravel(), side="right")
    idx = flat_idx.reshape(n_rays, n_fine) - np.arange(n_rays)[:, None] * (n_bins + 1) - 1
    idx = np.clip(idx, 0, n_bins - 1)

    rows = np.arange(n_rays)[:, None]
    cdf_lo = cdf[rows, idx]
    cdf_hi = cdf[rows, idx + 1]
    t_lo = coarse_ts[rows, idx]
    t_hi = coarse_ts[rows, idx + 1]
    denom = np.where(cdf_hi - cdf_lo > 1e-12, cdf_hi - cdf_lo, 1.0)
    fine = t_lo + (u - cdf_lo) / denom * (t_hi - t_lo)
    if np.any(degenerate):
        fine[degenerate] = near + rng.random((int(degenerate.sum()), n_fine)) * (far - near)
    return np.sort(np.concatenate([coarse_ts, fine], axis=1), axis=1)


def opaque_weights(sdf_along_ray, sharpness):
    """Surface-crossing compositing weights from per-sample scene SDF values.

    `sdf_along_ray` is (R, S) (a single ray may be passed as (S,)) at strictly
    ascending sample positions. Returns (weights (R, S-1), t_end (R,)) with
    weights >= 0 and sum(weights) + t_end == 1 up to float addition.
    """
    f = sdf_along_ray
    fv = value_of(f)
    if fv.ndim == 1:
        f = grad.reshape(f, (1, -1)) if grad.is_var(f) else fv[None, :]
        fv = value_of(f)
    if fv.shape[1] < 2:
        raise ValueError("opaque_weights: need at least 2 samples")

    sp = grad.softplus(grad.mul(f, -sharpness))  # -log CDF(s * f)
    delta = grad.minimum(grad.sub(sp[:, :-1], sp[:, 1:]), 0.0)
    one_minus_alpha = grad.exp(delta)  # in (0, 1]
    trans = grad.cumprod(one_minus_alpha, axis=-1)
    ones = np.ones((fv.shape[0], 1))
    t_full = grad.concat([ones, trans], axis=1)
    weights = grad.sub(t_full[:, :-1], t_full[:, 1:])
    # Defining the residual transmittance through the weight sum makes
    # sum(weights) + t_end == 1 hold exactly in floating point.
    t_end = grad.sub(1.0, grad.sumval(weights, axis=-1))
    return weights, t_end


def softmin_labels(sdfs, tau):
    """Temperature softmin over instances (axis 0), max-shift stabilized.

    Output is a simplex over instances at every point: nearer (smaller SDF)
    instances get larger weight.
    """
    fv = value_of(sdfs)
    shift = np.min(fv, axis=0, keepdims=True)  # constant shift: exact softmin
    e = grad.exp(grad.div(grad.sub(shift, sdfs), tau))
    total = grad.sumval(e, axis=0, keepdims=True)
    return grad.div(e, total)


def render_rays(origins, dirs, t_frame, params, cfg, rng, use_rdf=True, sharpness=None,
                bounds=None):
    """Integrate soft instance labels along a ray batch.

    Returns (labels (N, R), background (R,), aux) where aux carries the plain
    numpy sample positions and compositing weights for diagnostics. The label
    and background outputs are taped whenever `params` is. `bounds` pins
    (near, far) explicitly, e.g. for finite-difference checks where the
    scene-adaptive bounds would couple sample positions to the parameters.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n_rays = len(origins)
    s = cfg.sharpness if sharpness is None else sharpness
    near, far = bounds if bounds is not None else scene_near_far(params, t_frame, origins[0], cfg)

    t_arr = np.asarray(t_frame, dtype=np.float64)

    def point_times(n_samples):
        if t_arr.ndim == 0:
            return t_arr
        return np.repeat(t_arr, n_samples)

    ts = stratified_samples(rng, near, far, cfg.n_coarse, n_rays, jitter=cfg.jitter)
    if cfg.n_fine > 0:
        plain = detach_params(params)
        coarse_pts = (origins[:, None, :] + ts[..., None] * dirs[:, None, :]).reshape(-1, 3)
        coarse_sdf = fields.scene_sdf(
            coarse_pts, point_times(ts.shape[1]), plain, use_rdf=use_rdf
        ).reshape(n_rays, -1)
        cw, _ = opaque_weights(coarse_sdf, s)
        ts = hierarchical_resample(ts, cw, cfg.n_fine, rng, near, far)

    pts = (origins[:, None, :] + ts[..., None] * dirs[:, None, :]).reshape(-1, 3)
    inst = fields.instance_sdfs(pts, point_times(ts.shape[1]), params, use_rdf=use_rdf)  # (N, R*S)
    n_inst = params.n_instances
    n_samp = ts.shape[1]
    inst = grad.reshape(inst, (n_inst, n_rays, n_samp))
    scene = grad.amin(inst, axis=0)  # (R, S)
    weights, t_end = opaque_weights(scene, s)  # (R, S-1), (R,)
    lab = softmin_labels(inst[:, :, :-1], cfg.softmin_tau)  # (N, R, S-1)
    w3 = grad.reshape(weights, (1, n_rays, n_samp - 1))
    labels = grad.sumval(grad.mul(lab, w3), axis=2)  # (N, R)
    aux = {"ts": ts, "weights": value_of(weights), "near": near, "far": far}
    return labels, t_end, aux


def render_pixel(ray, t_frame, params, cfg, rng, use_rdf=True, sharpness=None, bounds=None):
    """Render a single ray to a RenderedPixel."""
    labels, t_end, aux = render_rays(
        ray.origin[None, :], ray.direction[None, :], t_frame, params, cfg, rng,
        use_rdf=use_rdf, sharpness=sharpness, bounds=bounds,
    )
    lab = value_of(labels)[:, 0]
    bg = float(value_of(t_end)[0])
    if not np.all(np.isfinite(lab)) or not np.isfinite(bg):
        raise FloatingPointError("render_pixel produced non-finite outputs")
    return RenderedPixel(labels=lab, background=bg, weights=aux["weights"][0], ts=aux["ts"][0])


# ---------------------------------------------------------------------------
# ray selection from ground-truth masks
# ---------------------------------------------------------------------------

@dataclass
class MaskIndex:
    """Precomputed pixel pools of one frame's mask: per-instance foreground,
    the dilated boundary band, and background, each with ground-truth labels."""

    instance_pixels: list      # per instance, (M_i, 2) int pixel coords
    band_pixels: np.ndarray    # (B, 2)
    band_labels: np.ndarray    # (B,)
    bg_pixels: np.ndarray      # (K, 2)
    bg_labels: np.ndarray      # (K,)
    counts: np.ndarray         # per-instance pixel counts


def build_mask_index(frame, instance_ids, cfg):
    mask = frame.mask
    if mask is None:
        raise ValueError("frame has no instance mask")
    n_inst = len(instance_ids)
    id_to_index = {int(iid): i for i, iid in enumerate(instance_ids)}
    fg = np.isin(mask, np.asarray(instance_ids, dtype=mask.dtype))
    instance_pixels = []
    counts = np.zeros(n_inst, dtype=np.int64)
    for i, iid in enumerate(instance_ids):
        ys, xs = np.nonzero(mask == iid)
        counts[i] = len(xs)
        instance_pixels.append(np.column_stack([xs, ys]))

    def labels_of(px):
        if len(px) == 0:
            return np.zeros(0, dtype=np.int64)
        vals = mask[px[:, 1], px[:, 0]]
        return np.array([id_to_index.get(int(v), n_inst) for v in vals], dtype=np.int64)

    band = ndimage.binary_dilation(fg, iterations=cfg.boundary_dilate_px) & ~fg
    ys, xs = np.nonzero(band)
    band_pixels = np.column_stack([xs, ys])
    ys, xs = np.nonzero(~fg & ~band)
    bg_pixels = np.column_stack([xs, ys])
    return MaskIndex(
        instance_pixels=instance_pixels,
        band_pixels=band_pixels,
        band_labels=labels_of(band_pixels),
        bg_pixels=bg_pixels,
        bg_labels=labels_of(bg_pixels),
        counts=counts,
    )


def sample_rays(frame, instance_ids, cfg, rng, index=None):
    """Select supervision rays for one frame from its instance mask.

    `instance_ids` orders the dataset mask ids into scene instance indices;
    mask pixels with ids outside this list count as background. The ray split
    is cfg.fg_fraction from instance interiors (proportional to mask area),
    cfg.boundary_fraction from a dilated boundary band, remainder from
    background. Every ray carries its ground-truth class in [0, N] with N =
    background.
    """
    if index is None:
        index = build_mask_index(frame, instance_ids, cfg)
    n_rays = cfg.rays_per_iter
    n_inst = len(instance_ids)
    counts = index.counts
    total_fg = int(counts.sum())

    if total_fg == 0:
        warnings.warn(f"frame {frame.frame_id}: no foreground pixels; sampling background only")
        pool = index.bg_pixels if len(index.bg_pixels) else index.band_pixels
        pick = rng.integers(0, len(pool), size=n_rays)
        pixels = pool[pick]
        origins, dirs = frame.pixel_rays(pixels)
        return RayBatch(origins, dirs, np.full(n_rays, n_inst, dtype=np.int64), pixels)

    n_fg = int(round(cfg.fg_fraction * n_rays))
    n_band = int(round(cfg.boundary_fraction * n_rays))
    n_bg = n_rays - n_fg - n_band

    # proportional per-instance quotas, largest remainder
    quota = counts / total_fg * n_fg
    alloc = np.floor(quota).astype(np.int64)
    remainder = quota - alloc
    for i in np.argsort(-remainder)[: n_fg - int(alloc.sum())]:
        alloc[i] += 1

    pix_list = []
    lab_list = []
    for i in range(n_inst):
        if alloc[i] == 0 or counts[i] == 0:
            continue
        pool = index.instance_pixels[i]
        pick = rng.integers(0, len(pool), size=alloc[i])
        pix_list.append(pool[pick])
        lab_list.append(np.full(alloc[i], i, dtype=np.int64))

    shortfall = 0
    for pool, pool_labels, count in (
        (index.band_pixels, index.band_labels, n_band),
        (index.bg_pixels, index.bg_labels, n_bg),
    ):
        if count <= 0:
            continue
        if len(pool) == 0:
            pool, pool_labels = index.bg_pixels, index.bg_labels
        if len(pool) == 0:
            shortfall += count
            continue
        pick = rng.integers(0, len(pool), size=count)
        pix_list.append(pool[pick])
        lab_list.append(pool_labels[pick])

    if shortfall > 0:
        # no band/background pixels (mask covers the image): spill back to fg
        all_fg = np.concatenate([p for p in index.instance_pixels if len(p)])
        all_fg_labels = np.concatenate(
            [np.full(len(p), i) for i, p in enumerate(index.instance_pixels) if len(p)]
        )
        pick = rng.integers(0, len(all_fg), size=shortfall)
        pix_list.append(all_fg[pick])
        lab_list.append(all_fg_labels[pick])

    pixels = np.concatenate(pix_list, axis=0)
    labels = np.concatenate(lab_list, axis=0)
    origins, dirs = frame.pixel_rays(pixels)
    return RayBatch(origins, dirs, labels, pixels)


def render_debug_mask(frame, t_frame, params, cfg, instance_ids=None, stride=1,
                      use_rdf=True, chunk=4096, rng=None):
    """Render every (strided) pixel and take the argmax label; returns a
    (H', W') array of dataset instance ids (0 = background). Plain numpy."""
    plain = detach_params(params)
    rng = rng or np.random.default_rng(0)
    xs = np.arange(0, frame.width, stride)
    ys = np.arange(0, frame.height, stride)
    gx, gy = np.meshgrid(xs, ys)
    pixels = np.column_stack([gx.ravel(), gy.ravel()])
    n_inst = plain.n_instances
    ids = np.asarray(instance_ids if instance_ids is not None else np.arange(1, n_inst + 1))

    out = np.zeros(len(pixels), dtype=np.uint16)
    cfg_still = RenderConfig(**{**cfg.__dict__, "jitter": False})
    for start in range(0, len(pixels), chunk):
        px = pixels[start : start + chunk]
        origins, dirs = frame.pixel_rays(px)
        labels, bg, _ = render_rays(origins, dirs, t_frame, plain, cfg_still, rng, use_rdf=use_rdf)
        stackv = np.vstack([value_of(labels), value_of(bg)[None, :]])  # (N+1, R)
        winner = np.argmax(stackv, axis=0)
        hit = winner < n_inst
        out[start : start + chunk][hit] = ids[winner[hit]].astype(np.uint16)
    return out.reshape(len(ys), len(xs))
