"""Field composition: instance embeddings, the hypernetwork that emits
residual-network weights, the nonnegative residual distance field, and the
time-varying per-instance / whole-scene signed distance fields.

Parameter vectors may be plain numpy arrays (fast evaluation) or grad.Var
leaves (taped optimization); every function here works with both.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grad, geometry
from .config import FieldConfig
from .grad import amin, softplus, value_of


@dataclass(frozen=True)
class MlpSpec:
    """Fully-connected net: `widths` = (in, hidden..., out).

    Hidden layers use the sharpened-softplus activation softplus(beta*x)/beta;
    the output layer is linear. Weights live in one flat vector laid out layer
    by layer as row-major W (in x out) followed by the bias (out,); see
    docs/FORMATS.md.
    """

    widths: tuple
    act_beta: float = 100.0

    @property
    def n_params(self):
        return sum(self.widths[i] * self.widths[i + 1] + self.widths[i + 1] for i in range(len(self.widths) - 1))

    def layer_slices(self):
        slices = []
        off = 0
        for i in range(len(self.widths) - 1):
            n_in, n_out = self.widths[i], self.widths[i + 1]
            w = slice(off, off + n_in * n_out)
            off += n_in * n_out
            b = slice(off, off + n_out)
            off += n_out
            slices.append((w, b, n_in, n_out))
        return slices

    def init_params(self, rng, final_scale=1.0):
        """He-style fan-in init; `final_scale` shrinks the last layer."""
        chunks = []
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            n_in, n_out = self.widths[i], self.widths[i + 1]
            scale = (1.0 / np.sqrt(n_in)) * (final_scale if i == n_layers - 1 else 1.0)
            chunks.append(rng.normal(0.0, scale, size=n_in * n_out))
            chunks.append(np.zeros(n_out))
        return np.concatenate(chunks)

    def forward(self, x, params):
        """Apply the net to x (P, in). Either argument may be a Var."""
        h = x
        layers = self.layer_slices()
        for li, (ws, bs, n_in, n_out) in enumerate(layers):
            W = grad.reshape(params[ws], (n_in, n_out))
            h = grad.add(grad.matmul(h, W), params[bs])
            if li < len(layers) - 1:
                h = softplus(h, beta=self.act_beta)
        return h

    def forward_with_input_grad(self, x, params):
        """Forward pass plus d(out)/d(x) pushed through by forward-mode chain
        rule written in taped ops, so the Jacobian stays differentiable with
        respect to `params`. Returns (out (P, n_out), jac (P, in, n_out))."""
        P = value_of(x).shape[0]
        n_in0 = self.widths[0]
        h = x
        jac = np.broadcast_to(np.eye(n_in0), (P, n_in0, n_in0)).copy()
        layers = self.layer_slices()
        for li, (ws, bs, n_in, n_out) in enumerate(layers):
            W = grad.reshape(params[ws], (n_in, n_out))
            pre = grad.add(grad.matmul(h, W), params[bs])
            jac = grad.matmul(jac, W)  # (P, in0, n_out)
            if li < len(layers) - 1:
                h = softplus(pre, beta=self.act_beta)
                dact = grad.sigmoid(grad.mul(pre, self.act_beta))  # (P, n_out)
                jac = grad.mul(jac, grad.reshape(dact, (P, 1, n_out)))
            else:
                h = pre
        return h, jac


@dataclass
class SceneModel:
    """Numpy-backed state of one optimization run: N boxes, their embeddings,
    and the shared hypernetwork weights. `ref_time` anchors box locations."""

    dims: np.ndarray        # (N, 3)
    locs: np.ndarray        # (N, 3)
    yaws: np.ndarray        # (N,)
    vels: np.ndarray        # (N, 3)
    dynamic: np.ndarray     # (N,) bool
    embeddings: np.ndarray  # (N, D)
    psi: np.ndarray         # flat hypernetwork weights
    ref_time: float
    cfg: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        if len(self.dims) < 1:
            raise ValueError("SceneModel needs at least one instance")
        self.dims = np.asarray(self.dims, dtype=np.float64)
        self.locs = np.asarray(self.locs, dtype=np.float64)
        self.yaws = np.asarray(self.yaws, dtype=np.float64)
        self.vels = np.asarray(self.vels, dtype=np.float64)
        self.dynamic = np.asarray(self.dynamic, dtype=bool)

    @property
    def n_instances(self):
        return len(self.dims)

    def residual_spec(self):
        return MlpSpec(widths=(3, *self.cfg.residual_hidden, 1), act_beta=self.cfg.act_beta)

    def hyper_spec(self):
        return MlpSpec(
            widths=(self.cfg.embed_dim, *self.cfg.hyper_hidden, self.residual_spec().n_params),
            act_beta=self.cfg.act_beta,
        )

    def params(self):
        """Plain-numpy SceneParams view (no tape)."""
        return SceneParams(
            dims=self.dims,
            locs=self.locs,
            yaws=self.yaws,
            vels=self.vels,
            dynamic=self.dynamic,
            embeddings=self.embeddings,
            psi=self.psi,
            ref_time=self.ref_time,
            residual_spec=self.residual_spec(),
            hyper_spec=self.hyper_spec(),
            cfg=self.cfg,
        )

    def boxes(self):
        return [
            geometry.InstanceBox(
                dims=self.dims[n],
                loc=self.locs[n],
                yaw=float(self.yaws[n]),
                vel=self.vels[n],
                dynamic=bool(self.dynamic[n]),
            )
            for n in range(self.n_instances)
        ]


def make_scene(boxes, ref_time, cfg=None, seed=0):
    """SceneModel from initial boxes, with seeded embeddings and hypernet."""
    cfg = cfg or FieldConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE11E]))
    n = len(boxes)
    scene = SceneModel(
        dims=np.stack([b.dims for b in boxes]),
        locs=np.stack([b.loc for b in boxes]),
        yaws=np.array([b.yaw for b in boxes]),
        vels=np.stack([b.vel for b in boxes]),
        dynamic=np.array([b.dynamic for b in boxes]),
        embeddings=rng.normal(0.0, cfg.embed_scale, size=(n, cfg.embed_dim)),
        psi=np.zeros(1),
        ref_time=ref_time,
        cfg=cfg,
    )
    scene.psi = scene.hyper_spec().init_params(rng, final_scale=cfg.hyper_out_scale)
    return scene


@dataclass
class SceneParams:
    """View of scene parameters used by field/render/loss code. The array
    fields are numpy arrays or grad.Var leaves/slices; `dynamic` is always a
    plain bool mask."""

    dims: object
    locs: object
    yaws: object
    vels: object
    dynamic: np.ndarray
    embeddings: object
    psi: object
    ref_time: float
    residual_spec: MlpSpec
    hyper_spec: MlpSpec
    cfg: FieldConfig

    _phi_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_instances(self):
        return len(self.dynamic)

    def location_at(self, n, t):
        """Taped/plain box-center location of instance n at time t."""
        loc = self.locs[n]
        gate = 1.0 if self.dynamic[n] else 0.0
        dt = float(t) - self.ref_time
        if gate == 0.0 or dt == 0.0:
            return loc
        return grad.add(loc, grad.mul(self.vels[n], gate * dt))

    def phi(self, n):
        """Residual-net weights for instance n, cached per forward pass."""
        if n not in self._phi_cache:
            self._phi_cache[n] = hypernet_forward(self.embeddings[n], self.psi, self.hyper_spec, self.cfg)
        return self._phi_cache[n]


def location_at(box, t, t0=0.0):
    """Box center at time t: loc + dynamic * vel * (t - t0)."""
    return box.location_at(t, t0)


def hypernet_forward(z, psi, hyper_spec, cfg):
    """Residual-net weights phi from one embedding: scaled hypernet output."""
    zv = grad.reshape(z, (1, -1))
    out = hyper_spec.forward(zv, psi)
    return grad.mul(grad.reshape(out, (-1,)), cfg.hyper_out_scale)


def _encode(points, dims, loc, yaw):
    """Box-frame coordinates normalized by the box extents."""
    R = geometry.rot_y_var(yaw) if grad.is_var(yaw) else geometry.rot_y(float(value_of(yaw)))
    rel = grad.sub(points, loc)
    p_box = grad.matmul(rel, R)
    return grad.div(p_box, dims)


def rdf_forward(points, phi, spec, cfg):
    """Nonnegative residual at already-encoded points: softplus(net + bias)."""
    raw = spec.forward(points, phi)
    return softplus(grad.add(grad.reshape(raw, (-1,)), cfg.residual_bias))


def _shifted_points(points, n, t, params, dt_points=None):
    """Points expressed relative to instance n's motion: per-point velocity
    shift removed so the box frame at the reference location applies."""
    if dt_points is not None:
        if params.dynamic[n]:
            shift = grad.mul(grad.reshape(params.vels[n], (1, 3)), dt_points[:, None])
            return grad.sub(points, shift), params.locs[n]
        return points, params.locs[n]
    return points, params.location_at(n, t)


def instance_residual(points, n, t, params, gate_values=None, dt_points=None):
    """Residual field of instance n at world points (P, 3), >= 0.

    With a configured gate margin and `gate_values` (plain cuboid-SDF values
    at the points), the residual net only runs within the near-surface band;
    outside it the residual is held at its initialization constant
    softplus(residual_bias). Far samples never influence compositing, so this
    is a pure evaluation-cost optimization.
    """
    cfgf = params.cfg
    margin = cfgf.residual_gate_margin
    if margin is not None and gate_values is not None:
        n_pts = len(points)
        sel = np.nonzero(np.abs(gate_values) <= margin)[0]
        far_const = float(softplus(np.float64(cfgf.residual_bias)))
        far_mask = np.ones(n_pts)
        far_mask[sel] = 0.0
        if len(sel) == 0:
            return far_mask * far_const
        sub_pts, loc = _shifted_points(
            points[sel], n, t, params,
            None if dt_points is None else dt_points[sel],
        )
        enc = _encode(sub_pts, params.dims[n], loc, params.yaws[n])
        near = rdf_forward(enc, params.phi(n), params.residual_spec, params.cfg)
        return grad.add(grad.scatter(near, sel, n_pts), far_mask * far_const)
    sub_pts, loc = _shifted_points(points, n, t, params, dt_points)
    enc = _encode(sub_pts, params.dims[n], loc, params.yaws[n])
    return rdf_forward(enc, params.phi(n), params.residual_spec, params.cfg)


def instance_sdf(points, n, t, params, use_rdf=True):
    """Signed distance of instance n at time t: cuboid SDF plus optional
    nonnegative residual."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    sdf = geometry.cuboid_sdf_points(pts, params.dims[n], params.location_at(n, t), params.yaws[n])
    if use_rdf:
        sdf = grad.add(sdf, instance_residual(pts, n, t, params, gate_values=value_of(sdf)))
    if single and not grad.is_var(sdf):
        return float(sdf[0])
    return sdf


def locations_at(params, t):
    """Taped/plain (N, 3) box centers at time t."""
    dt = float(t) - params.ref_time
    gate = params.dynamic.astype(np.float64)[:, None] * dt
    if not np.any(gate):
        return params.locs
    return grad.add(params.locs, grad.mul(params.vels, gate))


def instance_sdfs(points, t, params, use_rdf=True):
    """All instance SDFs at the given points, stacked to (N, P).

    `t` may be a scalar or a per-point array (rays drawn from frames at
    different times in one batch).
    """
    pts = np.asarray(points, dtype=np.float64)
    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.ndim == 0:
        dt_points = None
        base = geometry.cuboid_sdf_multi(pts, params.dims, locations_at(params, float(t_arr)), params.yaws)
    else:
        dt_points = t_arr - params.ref_time
        base = geometry.cuboid_sdf_multi(
            pts, params.dims, params.locs, params.yaws,
            vels=params.vels, dyn_gate=params.dynamic, dt_points=dt_points,
        )
    if not use_rdf:
        return base
    base_v = value_of(base)
    residuals = [
        instance_residual(pts, n, t, params, gate_values=base_v[n], dt_points=dt_points)
        for n in range(params.n_instances)
    ]
    return grad.add(base, grad.stack(residuals, axis=0))


def scene_sdf(points, t, params, use_rdf=True):
    """Scene SDF: min over instances (gradient follows the first argmin)."""
    sdfs = instance_sdfs(points, t, params, use_rdf)
    return amin(sdfs, axis=0)


def residual_spatial_gradient(points, n, t, params):
    """World-space gradient of the residual field of instance n at (P, 3)
    points. Differentiable w.r.t. embeddings/hypernet/box parameters."""
    pts = np.asarray(points, dtype=np.float64)
    dims = params.dims[n]
    loc = params.location_at(n, t)
    yaw = params.yaws[n]
    enc = _encode(pts, dims, loc, yaw)
    raw, jac_enc = params.residual_spec.forward_with_input_grad(enc, params.phi(n))
    raw = grad.reshape(raw, (-1,))
    dsig = grad.sigmoid(grad.add(raw, params.cfg.residual_bias))  # d softplus
    jac_enc = grad.reshape(jac_enc, (-1, 3))  # (P, 3): d raw / d enc
    # d enc / d p = R diag(1/dims) in row-vector form: grad_world = (jac/dims) @ R^T
    R = geometry.rot_y_var(yaw) if grad.is_var(yaw) else geometry.rot_y(float(value_of(yaw)))
    scaled = grad.div(jac_enc, dims)
    g_world = grad.matmul(scaled, geometry._transpose3(R))
    return grad.mul(g_world, grad.reshape(dsig, (-1, 1)))


def full_sdf_spatial_gradient(points, n, t, params):
    """World-space gradient of the full instance SDF (cuboid + residual)."""
    pts = np.asarray(points, dtype=np.float64)
    _, g_box = geometry.cuboid_sdf_with_spatial_grad(
        pts, params.dims[n], params.location_at(n, t), params.yaws[n]
    )
    g_res = residual_spatial_gradient(pts, n, t, params)
    return grad.add(g_box, g_res)


def rdf_spatial_gradient(points, n, t, params, mode="residual"):
    """Spatial gradient used by the Eikonal term.

    mode="residual" regularizes the residual field alone (as published);
    mode="full" regularizes the composed instance SDF.
    """
    if mode == "residual":
        return residual_spatial_gradient(points, n, t, params)
    if mode == "full":
        return full_sdf_spatial_gradient(points, n, t, params)
    raise ValueError(f"unknown eikonal mode {mode!r}")
