"""On-disk dataset layout and label/manifest serialization.

Everything numeric is plain text at 9 significant digits except masks (16-bit
binary PGM, big-endian per the PGM spec) and depth (little-endian float32
raster behind a 16-byte header). See docs/FORMATS.md for the column orders.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import geometry, matching
from . import scene as scene_mod

DEPTH_MAGIC = b"DPF1"
FMT = "{:.9g}"


def _fmt_row(values):
    return " ".join(FMT.format(float(v)) for v in values)


# ---------------------------------------------------------------------------
# mask / depth rasters
# ---------------------------------------------------------------------------

def write_mask_pgm(path, mask):
    mask = np.asarray(mask)
    if mask.dtype != np.uint16:
        mask = mask.astype(np.uint16)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(mask.astype(">u2").tobytes())


def read_mask_pgm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        line = fh.readline()
        while line.startswith(b"#"):
            line = fh.readline()
        w, h = (int(x) for x in line.split())
        maxval = int(fh.readline())
        if maxval != 65535:
            raise ValueError(f"{path}: expected 16-bit PGM, maxval {maxval}")
        data = fh.read(w * h * 2)
    return np.frombuffer(data, dtype=">u2").reshape(h, w).astype(np.uint16)


def write_depth_raster(path, depth):
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<III", w, h, 0))
        fh.write(depth.tobytes())


def read_depth_raster(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DEPTH_MAGIC:
            raise ValueError(f"{path}: bad depth raster magic {magic!r}")
        w, h, _ = struct.unpack("<III", fh.read(12))
        data = fh.read(w * h * 4)
    return np.frombuffer(data, dtype="<f4").reshape(h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """In-memory view of a dataset directory."""

    root: Path
    frames: list               # CameraFrame with masks attached
    gt_boxes: dict             # instance_id -> true InstanceBox (loc at t=0)
    meta: dict
    depth_dir: Path = None

    @property
    def n_frames(self):
        return len(self.frames)

    def has_depth(self):
        return self.depth_dir is not None and any(self.depth_dir.glob("frame_*.f32"))

    def depth(self, frame_id):
        path = self.depth_dir / f"frame_{frame_id:04d}.f32" if self.depth_dir else None
        if path is None or not path.exists():
            return None
        return read_depth_raster(path)

    def depths(self, frame_ids):
        return {fid: d for fid in frame_ids if (d := self.depth(fid)) is not None}


def write_dataset(root, spec, with_depth=True, rng=None):
    """Materialize a SceneSpec as a dataset directory; returns its path.

    Masks and depth are rendered from the true trajectory; the pose file gets
    the jittered poses (when jitter is configured) to emulate calibration
    error.
    """
    root = Path(root)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    if with_depth:
        (root / "depth").mkdir(parents=True, exist_ok=True)
    rng = rng or np.random.default_rng(np.random.SeedSequence([spec.seed, 0xD47A]))

    meta_lines = [
        f"template = {spec.template}",
        f"seed = {spec.seed}",
        f"n_frames = {spec.n_frames}",
        f"n_instances = {spec.n_instances}",
        f"width = {spec.width}",
        f"height = {spec.height}",
        f"fx = {FMT.format(spec.K[0, 0])}",
        f"fy = {FMT.format(spec.K[1, 1])}",
        f"cx = {FMT.format(spec.K[0, 2])}",
        f"cy = {FMT.format(spec.K[1, 2])}",
        f"mask_noise_px = {spec.mask_noise_px}",
        f"depth_noise_sigma = {FMT.format(spec.depth_noise_sigma)}",
        f"pose_jitter_t = {FMT.format(spec.pose_jitter_t)}",
        f"pose_jitter_deg = {FMT.format(spec.pose_jitter_deg)}",
    ]
    (root / "scene.txt").write_text("\n".join(meta_lines) + "\n", encoding="utf-8")

    positions, rotations = spec.jittered_poses(rng)
    pose_lines = ["# frame_id time r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz"]
    for k in range(spec.n_frames):
        row = [spec.times[k], *rotations[k].ravel(), *positions[k]]
        pose_lines.append(f"{k} " + _fmt_row(row))
    (root / "poses.txt").write_text("\n".join(pose_lines) + "\n", encoding="utf-8")

    box_lines = ["# instance_id dx dy dz lx ly lz yaw vx vy vz dynamic"]
    for i, box in enumerate(spec.instances):
        row = [*box.dims, *box.loc, box.yaw, *box.vel]
        box_lines.append(f"{i + 1} " + _fmt_row(row) + f" {int(box.dynamic)}")
    (root / "boxes_gt.txt").write_text("\n".join(box_lines) + "\n", encoding="utf-8")

    for k in range(spec.n_frames):
        mask = scene_mod.render_gt_mask(spec, k)
        write_mask_pgm(root / "masks" / f"frame_{k:04d}.pgm", mask)
        if with_depth:
            depth = scene_mod.render_gt_depth(spec, k)
            write_depth_raster(root / "depth" / f"frame_{k:04d}.f32", depth)
    return root


def _parse_kv(path):
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line or "=" not in line:
            continue
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def load_dataset(root):
    root = Path(root)
    scene_file = root / "scene.txt"
    poses_file = root / "poses.txt"
    boxes_file = root / "boxes_gt.txt"
    for required in (scene_file, poses_file, boxes_file):
        if not required.exists():
            raise FileNotFoundError(f"dataset is missing {required.name} in {root}")
    meta = _parse_kv(scene_file)
    width = int(meta["width"])
    height = int(meta["height"])
    K = np.array(
        [
            [float(meta["fx"]), 0.0, float(meta["cx"])],
            [0.0, float(meta["fy"]), float(meta["cy"])],
            [0.0, 0.0, 1.0],
        ]
    )

    frames = []
    for line in poses_file.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        fid = int(parts[0])
        vals = [float(x) for x in parts[1:]]
        time, rot, trans = vals[0], np.array(vals[1:10]).reshape(3, 3), np.array(vals[10:13])
        mask_path = root / "masks" / f"frame_{fid:04d}.pgm"
        if not mask_path.exists():
            raise FileNotFoundError(f"dataset is missing {mask_path}")
        mask = read_mask_pgm(mask_path)
        frames.append(
            geometry.CameraFrame(
                K=K, rotation=rot, translation=trans, time=time,
                width=width, height=height, frame_id=fid, mask=mask,
            )
        )
    frames.sort(key=lambda f: f.frame_id)
    if [f.frame_id for f in frames] != list(range(len(frames))):
        raise ValueError("frame ids must be contiguous from 0")

    gt_boxes = {}
    for line in boxes_file.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        iid = int(parts[0])
        vals = [float(x) for x in parts[1:11]]
        gt_boxes[iid] = geometry.InstanceBox(
            dims=np.array(vals[0:3]),
            loc=np.array(vals[3:6]),
            yaw=vals[6],
            vel=np.array(vals[7:10]),
            dynamic=bool(int(parts[11])),
        )

    depth_dir = root / "depth"
    return Dataset(
        root=root,
        frames=frames,
        gt_boxes=gt_boxes,
        meta=meta,
        depth_dir=depth_dir if depth_dir.exists() else None,
    )


# ---------------------------------------------------------------------------
# pseudo-label files
# ---------------------------------------------------------------------------

LABEL_HEADER = "# instance_id dx dy dz lx ly lz yaw vx vy vz dynamic confidence"


def write_labels(path, labels, target_frame_id, target_time):
    lines = [
        "# autobox3d labels v1",
        f"# target_frame {target_frame_id} time {FMT.format(target_time)}",
        LABEL_HEADER,
    ]
    for lab in labels:
        box = lab.box
        row = [*box.dims, *box.loc, box.yaw, *box.vel]
        lines.append(
            f"{lab.instance_id} " + _fmt_row(row) + f" {int(box.dynamic)} " + FMT.format(lab.confidence)
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_labels(path):
    labels = []
    target_frame_id = None
    target_time = 0.0
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# target_frame"):
            parts = line.split()
            target_frame_id = int(parts[2])
            target_time = float(parts[4])
            continue
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        box = geometry.InstanceBox(
            dims=np.array([float(x) for x in parts[1:4]]),
            loc=np.array([float(x) for x in parts[4:7]]),
            yaw=float(parts[7]),
            vel=np.array([float(x) for x in parts[8:11]]),
            dynamic=bool(int(parts[11])),
        )
        labels.append(
            matching.PseudoLabel(
                box=box,
                confidence=float(parts[12]),
                frame_id=target_frame_id if target_frame_id is not None else 0,
                instance_id=int(parts[0]),
            )
        )
    return labels, target_frame_id, target_time
