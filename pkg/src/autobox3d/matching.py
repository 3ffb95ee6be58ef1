"""Bipartite matching between optimized boxes and ground-truth 2D boxes, and
the multi-view confidence score attached to each pseudo label."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np

from . import geometry

PAD_COST = 1.0


@dataclass
class Assignment:
    """row_to_col over the padded square matrix; `n_rows`/`n_cols` are the
    unpadded counts. Pairs touching padding are reported unmatched."""

    row_to_col: np.ndarray
    total_cost: float
    n_rows: int
    n_cols: int

    def matched_pairs(self):
        return [
            (r, int(c))
            for r, c in enumerate(self.row_to_col)
            if r < self.n_rows and c < self.n_cols
        ]


@dataclass
class PseudoLabel:
    box: geometry.InstanceBox
    confidence: float
    frame_id: int
    instance_id: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def _solve_square(cost):
    """Minimum-cost perfect matching on a square matrix via the O(n^3)
    augmenting-path (potentials) algorithm. Returns (row_to_col, total)."""
    n = len(cost)
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j] = row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        if p[j] > 0:
            row_to_col[p[j] - 1] = j - 1
    total = float(sum(cost[r, row_to_col[r]] for r in range(n)))
    return row_to_col, total


def hungarian(cost):
    """Exact minimum-cost assignment; among cost-optimal permutations, the
    lexicographically smallest (by row_to_col sequence) is returned.

    Rectangular inputs are padded square with PAD_COST; padded pairs appear in
    the assignment but are excluded from Assignment.matched_pairs().
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("hungarian: cost must be a matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian: cost entries must be finite")
    n_rows, n_cols = cost.shape
    n = max(n_rows, n_cols)
    padded = np.full((n, n), PAD_COST)
    padded[:n_rows, :n_cols] = cost

    _, best = _solve_square(padded)
    tol = 1e-9 * max(1.0, abs(best))

    # Lexicographic refinement: fix rows in order to the smallest column that
    # still admits an optimal completion.
    fixed_cols = []
    free_cols = list(range(n))
    prefix = 0.0
    for r in range(n):
        chosen = None
        for c in sorted(free_cols):
            rest_rows = list(range(r + 1, n))
            rest_cols = [x for x in free_cols if x != c]
            sub_total = 0.0
            if rest_rows:
                sub = padded[np.ix_(rest_rows, rest_cols)]
                _, sub_total = _solve_square(sub)
            if prefix + padded[r, c] + sub_total <= best + tol:
                chosen = c
                break
        if chosen is None:  # numerical safety net; fall back to any optimum
            chosen = sorted(free_cols)[0]
        prefix += padded[r, chosen]
        fixed_cols.append(chosen)
        free_cols.remove(chosen)

    row_to_col = np.asarray(fixed_cols, dtype=np.int64)
    return Assignment(row_to_col=row_to_col, total_cost=best, n_rows=n_rows, n_cols=n_cols)


def brute_force_assignment(cost):
    """Oracle: exhaustive minimum over all permutations (use for n <= 8)."""
    cost = np.asarray(cost, dtype=np.float64)
    n = len(cost)
    best_perm, best_total = None, np.inf
    for perm in itertools.permutations(range(n)):
        total = sum(cost[i, perm[i]] for i in range(n))
        if total < best_total - 1e-15:
            best_total = total
            best_perm = perm
    return np.asarray(best_perm), float(best_total)


def visible_source_frames(frames, instance_ids, min_px=25, target_frame_id=None):
    """Frames where every target instance's mask has at least `min_px` pixels.

    Falls back to the target frame alone (with a warning) when no frame
    qualifies.
    """
    good = []
    for frame in frames:
        if frame.mask is None:
            continue
        counts = [(frame.mask == iid).sum() for iid in instance_ids]
        if all(c >= min_px for c in counts):
            good.append(frame.frame_id)
    if not good:
        warnings.warn("no frame sees every instance; falling back to the target frame")
        good = [target_frame_id if target_frame_id is not None else frames[0].frame_id]
    return good


def matching_costs(boxes, frames, gt_boxes2d, t0=0.0):
    """Cost matrix Q[n, m] = mean over frames of (1 - IoU(projection of box n,
    ground-truth 2D box m)). Frames missing either side of a pair are skipped
    for that pair with the divisor adjusted; pairs with no usable frame get
    cost 1."""
    n = len(boxes)
    m = max((len(g) for g in gt_boxes2d), default=0)
    acc = np.zeros((n, m))
    cnt = np.zeros((n, m), dtype=np.int64)
    skipped = 0
    for frame, gts in zip(frames, gt_boxes2d):
        projs = []
        for box in boxes:
            try:
                projs.append(geometry.project_box(box, frame, t0=t0))
            except geometry.BehindCameraError:
                projs.append(None)
        for bi, proj in enumerate(projs):
            for gi, gt in enumerate(gts):
                if proj is None or gt is None:
                    skipped += 1
                    continue
                acc[bi, gi] += 1.0 - float(geometry.iou2d(proj, gt))
                cnt[bi, gi] += 1
    q = np.where(cnt > 0, acc / np.maximum(cnt, 1), PAD_COST)
    return q, {"pair_frames_skipped": skipped}


def confidence_scores(boxes, frames, gt_boxes2d, assignment, t0=0.0, exclude_truncated=False):
    """Per-box confidence: mean over frames of IoU between the projected
    optimized box and its matched ground-truth 2D box. Unmatched boxes score
    0."""
    n = len(boxes)
    conf = np.zeros(n)
    matched = dict(assignment.matched_pairs())
    for bi in range(n):
        gi = matched.get(bi)
        if gi is None:
            continue
        total, count = 0.0, 0
        for frame, gts in zip(frames, gt_boxes2d):
            if gi >= len(gts) or gts[gi] is None:
                continue
            try:
                proj = geometry.project_box(boxes[bi], frame, t0=t0)
            except geometry.BehindCameraError:
                continue
            if exclude_truncated and proj.truncated:
                continue
            total += float(geometry.iou2d(proj, gts[gi]))
            count += 1
        conf[bi] = total / count if count else 0.0
    return np.clip(conf, 0.0, 1.0)
