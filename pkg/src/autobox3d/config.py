"""Run configuration: rendering, losses, networks, optimization, thresholds.

All knobs live in flat dataclasses so a run can be described by a plain
key = value config file (see docs/FORMATS.md) and overridden from the CLI.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field


@dataclass
class RenderConfig:
    n_coarse: int = 100
    n_fine: int = 100
    near: float = 0.1
    far_min: float = 1.0
    far_max: float = 120.0
    sharpness: float = 64.0          # inverse logistic width of the surface CDF
    sharpness_start: float = 8.0     # annealed from this over sharpness_anneal_iters
    sharpness_anneal_iters: int = 500
    softmin_tau: float = 0.1         # meters; instance-label blending temperature
    rays_per_iter: int = 1000
    fg_fraction: float = 0.7         # rays inside instance masks
    boundary_fraction: float = 0.2   # rays from the dilated boundary band
    boundary_dilate_px: int = 5
    jitter: bool = True

    def __post_init__(self):
        if self.near >= self.far_min:
            raise ValueError("RenderConfig: near must be < far_min")
        if self.n_coarse < 2:
            raise ValueError("RenderConfig: need at least 2 coarse samples")
        if self.sharpness <= 0.0 or self.softmin_tau <= 0.0:
            raise ValueError("RenderConfig: sharpness and softmin_tau must be positive")

    def sharpness_at(self, iteration):
        """Annealed sharpness: geometric ramp start -> sharpness, then flat."""
        if self.sharpness_anneal_iters <= 0 or iteration >= self.sharpness_anneal_iters:
            return self.sharpness
        frac = max(iteration, 0) / self.sharpness_anneal_iters
        return self.sharpness_start * (self.sharpness / self.sharpness_start) ** frac


@dataclass
class LossWeights:
    alpha: float = 1.0          # Huber part of the projection loss
    beta: float = 0.1           # DIoU part of the projection loss
    lambda_proj: float = 1.0
    lambda_slh: float = 1.0
    lambda_eik: float = 0.01
    lambda_init: float = 0.1
    huber_delta: float = 1.0    # in diagonal-normalized pixel units
    truncated_weight: float = 1.0  # down-weight for truncated projections
    eikonal_points: int = 512
    eikonal_inflate: float = 0.2   # sample inside boxes inflated by this fraction
    eikonal_mode: str = "residual"  # "residual" (as published) or "full"

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_proj", "lambda_slh", "lambda_eik", "lambda_init"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"LossWeights: {name} must be >= 0")
        if self.eikonal_mode not in ("residual", "full"):
            raise ValueError("LossWeights: eikonal_mode must be 'residual' or 'full'")


@dataclass
class FieldConfig:
    embed_dim: int = 256
    residual_hidden: tuple = (32, 32)    # desk-scale residual net; paper profile below
    hyper_hidden: tuple = (16, 16)
    hyper_out_scale: float = 0.01        # keeps initial residual-net weights near zero
    residual_bias: float = -4.0          # raw-output offset so softplus starts ~2 cm
    act_beta: float = 100.0              # sharpened-softplus activation stiffness
    embed_scale: float = 0.01
    residual_gate_margin: float = None   # meters; run the residual net only within
                                         # this |cuboid sdf| band (None = everywhere)

    @staticmethod
    def paper_profile():
        """Full-fidelity sizes: residual net 4x256, hypernetwork 4x16."""
        return FieldConfig(residual_hidden=(256, 256, 256, 256), hyper_hidden=(16, 16, 16, 16))


@dataclass
class InitConfig:
    erosion_k: int = 5
    warp_eta1: float = 0.05           # normalized-intensity warp error threshold
    density_radius: float = 0.3       # meters
    density_eta2: int = 8             # min neighbors within the radius
    dynamic_threshold: float = 0.03   # m/s; strictly above -> dynamic
    min_points_location: int = 100
    visibility_min_px: int = 25
    fallback_depth: float = 20.0      # used when no depth maps are available
    center_offset: bool = True        # push surface centroid toward the box center
    prior_dims: tuple = (3.9, 1.56, 1.6)  # length, height, width (car prior)


@dataclass
class RunConfig:
    n_source_frames: int = 16
    frames_per_iter: int = 4   # ray budget is split across this many source frames
    total_iters: int = 3000
    warmup_iters: int = 1000
    seed: int = 0
    deterministic: bool = True
    velocity_enabled: bool = True
    init_enabled: bool = True
    grad_clip: float = 10.0
    min_dim: float = 0.1              # projected-gradient floor for box extents
    lr_boxes: float = 1e-2
    lr_boxes_final: float = 1e-4
    lr_embeddings: float = 1e-3
    lr_embeddings_final: float = 1e-5
    lr_hypernet: float = 1e-4
    lr_hypernet_final: float = 1e-6
    log_every: int = 1
    render: RenderConfig = field(default_factory=RenderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    fields: FieldConfig = field(default_factory=FieldConfig)
    init: InitConfig = field(default_factory=InitConfig)

    def __post_init__(self):
        if self.warmup_iters >= self.total_iters:
            raise ValueError("RunConfig: warmup_iters must be < total_iters")
        if self.n_source_frames < 1:
            raise ValueError("RunConfig: need at least one source frame")


def desk_profile(**overrides):
    """Desk-scale run profile: small residual/hyper MLPs, a lighter ray
    budget, and near-surface residual gating so a full 3000-iteration
    optimization fits in minutes on a CPU."""
    cfg = RunConfig()
    cfg.render.rays_per_iter = 192
    cfg.render.n_coarse = 40
    cfg.render.n_fine = 40
    cfg.fields.residual_gate_margin = 2.0
    for key, val in overrides.items():
        _set_by_path(cfg, key, val)
    return cfg


# ---------------------------------------------------------------------------
# flat key = value (de)serialization
# ---------------------------------------------------------------------------

_SECTIONS = {"render": RenderConfig, "loss": LossWeights, "fields": FieldConfig, "init": InitConfig}


def config_to_lines(cfg):
    """Flatten a RunConfig into sorted 'dotted.key = value' lines."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        val = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sf in dataclasses.fields(val):
                lines.append(f"{f.name}.{sf.name} = {_fmt(getattr(val, sf.name))}")
        else:
            lines.append(f"{f.name} = {_fmt(val)}")
    return sorted(lines)


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def _parse_value(text, current):
    low = text.strip().lower()
    if low in ("none", "null"):
        return None
    if isinstance(current, bool):
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse boolean from {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float) or current is None:
        return float(text)
    if isinstance(current, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        elem = current[0] if current else 0.0
        return tuple(type(elem)(p) for p in parts)
    return text.strip()


def _set_by_path(cfg, dotted, raw):
    obj = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not hasattr(obj, p):
            raise KeyError(f"unknown config section {p!r} in {dotted!r}")
        obj = getattr(obj, p)
    name = parts[-1]
    if not hasattr(obj, name):
        raise KeyError(f"unknown config key {dotted!r}")
    current = getattr(obj, name)
    value = raw if not isinstance(raw, str) else _parse_value(raw, current)
    setattr(obj, name, value)


def apply_overrides(cfg, pairs):
    """Apply 'key=value' override strings to a RunConfig in place."""
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not of the form key=value")
        key, _, raw = pair.partition("=")
        _set_by_path(cfg, key.strip(), raw.strip())
    return cfg


def load_config(path, base=None):
    """Read a key = value config file into a RunConfig."""
    cfg = base if base is not None else RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = line.partition("=")
            _set_by_path(cfg, key.strip(), raw.strip())
    return cfg


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(config_to_lines(cfg)) + "\n")
