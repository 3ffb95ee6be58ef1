"""Desk-scale quality metrics for pseudo labels against true boxes.

Predictions and ground truth are matched by instance id. Reported per split
(overall / static / dynamic): mean 3D IoU, recall at IoU 0.3/0.5/0.7, yaw
error (mod pi, degrees), center error, velocity error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import geometry

RECALL_THRESHOLDS = (0.3, 0.5, 0.7)


@dataclass
class InstanceEval:
    instance_id: int
    iou3d: float
    center_err: float
    yaw_err_deg: float
    vel_err: float
    dynamic: bool
    confidence: float


def yaw_error_mod_pi(a, b):
    """Heading difference ignoring the box's 180-degree symmetry, radians."""
    d = abs(geometry.wrap_angle(a - b)) % math.pi
    return min(d, math.pi - d)


def evaluate_labels(labels, gt_boxes, target_time):
    """Compare pseudo labels to true boxes at the target time.

    `gt_boxes` maps instance_id -> true InstanceBox with locations at scene
    t=0; label boxes carry locations at `target_time`. Returns (metrics dict,
    per-instance list); unmatched ids are reported and count as misses.
    """
    by_id = {lab.instance_id: lab for lab in labels}
    rows = []
    missing = []
    for iid, gt in sorted(gt_boxes.items()):
        lab = by_id.get(iid)
        if lab is None:
            missing.append(iid)
            continue
        gt_now = geometry.InstanceBox(
            dims=gt.dims,
            loc=gt.location_at(target_time, 0.0),
            yaw=gt.yaw,
            vel=gt.vel,
            dynamic=gt.dynamic,
        )
        pred = lab.box
        rows.append(
            InstanceEval(
                instance_id=iid,
                iou3d=geometry.iou3d(pred, gt_now, t=target_time, t0=target_time),
                center_err=float(np.linalg.norm(pred.loc - gt_now.loc)),
                yaw_err_deg=math.degrees(yaw_error_mod_pi(pred.yaw, gt_now.yaw)),
                vel_err=float(np.linalg.norm(pred.vel - gt_now.vel)),
                dynamic=gt.dynamic,
                confidence=lab.confidence,
            )
        )

    extra = sorted(set(by_id) - set(gt_boxes))
    metrics = {"n_gt": len(gt_boxes), "n_pred": len(labels),
               "n_matched": len(rows), "missing_ids": missing, "extra_ids": extra}
    for split in ("overall", "static", "dynamic"):
        if split == "overall":
            sel = rows
            n_gt = len(gt_boxes)
        else:
            want = split == "dynamic"
            sel = [r for r in rows if r.dynamic == want]
            n_gt = sum(1 for g in gt_boxes.values() if g.dynamic == want)
        prefix = "" if split == "overall" else f"{split}_"
        if n_gt == 0:
            metrics[f"{prefix}defined"] = False
            continue
        metrics[f"{prefix}defined"] = True
        ious = [r.iou3d for r in sel]
        metrics[f"{prefix}mean_iou3d"] = float(np.mean(ious)) if sel else 0.0
        for thr in RECALL_THRESHOLDS:
            hit = sum(1 for r in sel if r.iou3d >= thr)
            metrics[f"{prefix}recall@{thr:.1f}"] = hit / n_gt
        if sel:
            metrics[f"{prefix}mean_center_err"] = float(np.mean([r.center_err for r in sel]))
            metrics[f"{prefix}mean_yaw_err_deg"] = float(np.mean([r.yaw_err_deg for r in sel]))
            metrics[f"{prefix}mean_vel_err"] = float(np.mean([r.vel_err for r in sel]))
    return metrics, rows


def metrics_lines(metrics):
    """Machine-readable key = value lines, deterministic ordering."""
    lines = []
    for key in sorted(metrics):
        val = metrics[key]
        if isinstance(val, bool):
            text = "true" if val else "false"
        elif isinstance(val, float):
            text = f"{val:.9g}"
        elif isinstance(val, list):
            text = ",".join(str(v) for v in val)
        else:
            text = str(val)
        lines.append(f"{key} = {text}")
    return lines


def metrics_table(metrics, rows):
    """Human-readable report."""
    out = ["instance  iou3d  center_err  yaw_err_deg  vel_err  dynamic  conf"]
    for r in rows:
        out.append(
            f"{r.instance_id:8d}  {r.iou3d:5.3f}  {r.center_err:10.3f}  "
            f"{r.yaw_err_deg:11.2f}  {r.vel_err:7.3f}  {str(r.dynamic):>7}  {r.confidence:4.2f}"
        )
    out.append("")
    for split in ("", "static_", "dynamic_"):
        if not metrics.get(f"{split}defined", False):
            continue
        name = split.rstrip("_") or "overall"
        if f"{split}mean_iou3d" not in metrics:
            continue
        recalls = "  ".join(
            f"r@{thr:.1f}={metrics[f'{split}recall@{thr:.1f}']:.2f}" for thr in RECALL_THRESHOLDS
        )
        out.append(f"{name}: mean_iou={metrics[f'{split}mean_iou3d']:.3f}  {recalls}")
    return "\n".join(out)
