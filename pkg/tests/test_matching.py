import numpy as np
import pytest

from autobox3d import geometry, matching
from autobox3d.geometry import Box2D, CameraFrame, InstanceBox


def make_frame(time=0.0, translation=None, mask=None, frame_id=0, w=200, h=150):
    return CameraFrame(
        K=np.array([[200.0, 0, w / 2], [0, 200.0, h / 2], [0, 0, 1.0]]),
        rotation=np.eye(3),
        translation=np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64),
        time=time,
        width=w,
        height=h,
        frame_id=frame_id,
        mask=mask,
    )


# ---------------------------------------------------------------------------
# hungarian
# ---------------------------------------------------------------------------

def test_hungarian_identity():
    a = matching.hungarian(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert list(a.row_to_col) == [0, 1]
    assert a.total_cost == pytest.approx(0.0)


def test_hungarian_swap():
    a = matching.hungarian(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert list(a.row_to_col) == [1, 0]
    assert a.total_cost == pytest.approx(0.0)


def test_hungarian_vs_brute_force_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        q = rng.uniform(0.0, 1.0, size=(6, 6))
        got = matching.hungarian(q)
        _, want = matching.brute_force_assignment(q)
        assert got.total_cost == pytest.approx(want, abs=1e-9)
        # returned assignment realizes the optimal cost
        realized = sum(q[r, c] for r, c in enumerate(got.row_to_col))
        assert realized == pytest.approx(want, abs=1e-9)


def test_hungarian_lexicographic_tie_break():
    # every permutation has the same cost: the identity must win
    q = np.zeros((4, 4))
    a = matching.hungarian(q)
    assert list(a.row_to_col) == [0, 1, 2, 3]
    # two optimal swaps: {0->0,1->1} and {0->1,1->0} both cost 2
    q2 = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert list(matching.hungarian(q2).row_to_col) == [0, 1]


def test_hungarian_rectangular_padding():
    q = np.array([[0.1, 0.9, 0.9]])  # 1 prediction, 3 ground truths
    a = matching.hungarian(q)
    assert a.n_rows == 1 and a.n_cols == 3
    pairs = a.matched_pairs()
    assert pairs == [(0, 0)]
    q2 = np.array([[0.9], [0.1], [0.8]])  # 3 predictions, 1 ground truth
    a2 = matching.hungarian(q2)
    assert a2.matched_pairs() == [(1, 0)]


def test_hungarian_rejects_nonfinite():
    with pytest.raises(ValueError):
        matching.hungarian(np.array([[np.inf, 0.0], [0.0, 1.0]]))


# ---------------------------------------------------------------------------
# visible frames
# ---------------------------------------------------------------------------

def masked_frame(frame_id, areas):
    """Mask with one square blob of `areas[iid]` pixels per instance id."""
    mask = np.zeros((100, 160), dtype=np.uint16)
    x = 5
    for iid, area in areas.items():
        side = max(1, int(np.sqrt(area)))
        mask[5 : 5 + area // side, x : x + side] = iid
        x += side + 10
    return make_frame(frame_id=frame_id, mask=mask)


def test_visible_source_frames_all_visible():
    frames = [masked_frame(i, {1: 100, 2: 100}) for i in range(4)]
    assert matching.visible_source_frames(frames, [1, 2]) == [0, 1, 2, 3]


def test_visible_source_frames_exit():
    frames = [masked_frame(i, {1: 100, 2: 100}) for i in range(4)]
    frames[2] = masked_frame(2, {1: 100})  # instance 2 leaves the view
    assert matching.visible_source_frames(frames, [1, 2]) == [0, 1, 3]


def test_visible_source_frames_boundary_inclusive():
    frames = [masked_frame(0, {1: 25})]
    assert matching.visible_source_frames(frames, [1], min_px=25) == [0]
    frames = [masked_frame(0, {1: 24})]
    with pytest.warns(UserWarning):
        got = matching.visible_source_frames(frames, [1], min_px=25, target_frame_id=9)
    assert got == [9]


# ---------------------------------------------------------------------------
# matching costs and confidence
# ---------------------------------------------------------------------------

def test_matching_costs_diagonal_zero():
    boxes = [
        InstanceBox.static(np.array([2.0, 1.2, 1.5]), np.array([-2.0, 0.0, 10.0])),
        InstanceBox.static(np.array([2.0, 1.2, 1.5]), np.array([2.0, 0.0, 14.0])),
    ]
    frames = [make_frame(time=t, translation=[0, 0, t]) for t in (0.0, 1.0)]
    gt = [[geometry.project_box(b, f) for b in boxes] for f in frames]
    q, info = matching.matching_costs(boxes, frames, gt)
    assert np.allclose(np.diag(q), 0.0, atol=1e-12)
    assert q[0, 1] > 0.5 and q[1, 0] > 0.5
    assert info["pair_frames_skipped"] == 0


def test_matching_costs_single_frame_arithmetic():
    box = InstanceBox.static(np.array([2.0, 1.0, 1.0]), np.array([0.0, 0.0, 10.0]))
    frame = make_frame()
    proj = geometry.project_box(box, frame)
    w = proj.xmax - proj.xmin
    # shift gt by 60% of the width: IoU = 0.4/1.6 = 0.25 -> cost 0.75
    gt = Box2D(proj.xmin + 0.6 * w, proj.ymin, proj.xmax + 0.6 * w, proj.ymax)
    q, _ = matching.matching_costs([box], [frame], [[gt]])
    assert q[0, 0] == pytest.approx(0.75, abs=1e-9)


def test_matching_costs_mean_over_frames():
    box = InstanceBox.static(np.array([2.0, 1.0, 1.0]), np.array([0.0, 0.0, 10.0]))
    frames = [make_frame(time=0.0), make_frame(time=1.0)]
    projs = [geometry.project_box(box, f) for f in frames]

    def shifted(p, frac):
        w = p.xmax - p.xmin
        s = w * frac
        return Box2D(p.xmin + s, p.ymin, p.xmax + s, p.ymax)

    # IoU 0.2 -> shift = 2/3 w wait: iou = (1-f)/(1+f); f for iou .2: (1-f)/(1+f)=.2 -> f=2/3
    gt = [[shifted(projs[0], 2.0 / 3.0)], [shifted(projs[1], 0.25)]]  # IoUs 0.2 and 0.6
    q, _ = matching.matching_costs([box], frames, gt)
    assert q[0, 0] == pytest.approx(1.0 - 0.4, abs=1e-9)  # mean(0.8, 0.4) = 0.6


def test_matching_costs_missing_gt_adjusts_divisor():
    box = InstanceBox.static(np.array([2.0, 1.0, 1.0]), np.array([0.0, 0.0, 10.0]))
    frames = [make_frame(time=0.0), make_frame(time=1.0)]
    proj0 = geometry.project_box(box, frames[0])
    gt = [[proj0], [None]]
    q, info = matching.matching_costs([box], frames, gt)
    assert q[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert info["pair_frames_skipped"] == 1


def test_confidence_perfect_and_disjoint():
    boxes = [
        InstanceBox.static(np.array([2.0, 1.2, 1.5]), np.array([-2.0, 0.0, 10.0])),
        InstanceBox.static(np.array([2.0, 1.2, 1.5]), np.array([2.0, 0.0, 14.0])),
    ]
    frames = [make_frame(time=t, translation=[0, 0, 0.5 * t]) for t in (0.0, 1.0, 2.0)]
    gt = [[geometry.project_box(b, f) for b in boxes] for f in frames]
    q, _ = matching.matching_costs(boxes, frames, gt)
    assignment = matching.hungarian(q)
    conf = matching.confidence_scores(boxes, frames, gt, assignment)
    assert np.allclose(conf, 1.0, atol=1e-9)
    # break instance 1's gt everywhere: disjoint -> confidence 0
    gt_broken = [[row[0], Box2D(0, 0, 1, 1)] for row in gt]
    q2, _ = matching.matching_costs(boxes, frames, gt_broken)
    assignment2 = matching.hungarian(q2)
    conf2 = matching.confidence_scores(boxes, frames, gt_broken, assignment2)
    assert conf2[0] == pytest.approx(1.0, abs=1e-9)
    assert conf2[1] == pytest.approx(0.0, abs=1e-9)


def test_confidence_mean_over_frames():
    box = InstanceBox.static(np.array([2.0, 1.0, 1.0]), np.array([0.0, 0.0, 10.0]))
    frames = [make_frame(time=0.0), make_frame(time=1.0)]
    projs = [geometry.project_box(box, f) for f in frames]
    w = projs[1].xmax - projs[1].xmin
    s = w / 3.0  # IoU (1-1/3)/(1+1/3) = 0.5
    gt = [[projs[0]], [Box2D(projs[1].xmin + s, projs[1].ymin, projs[1].xmax + s, projs[1].ymax)]]
    q, _ = matching.matching_costs([box], frames, gt)
    conf = matching.confidence_scores([box], frames, gt, matching.hungarian(q))
    assert conf[0] == pytest.approx(0.75, abs=1e-9)


def test_confidence_frame_order_invariance():
    rng = np.random.default_rng(1)
    boxes = [
        InstanceBox.static(rng.uniform(1, 2, 3), np.array([rng.uniform(-3, 3), 0.0, rng.uniform(8, 16)]))
        for _ in range(3)
    ]
    frames = [make_frame(time=t, translation=[0.2 * t, 0, t]) for t in range(4)]
    gt = [[geometry.project_box(b, f) for b in boxes] for f in frames]
    q, _ = matching.matching_costs(boxes, frames, gt)
    a = matching.hungarian(q)
    conf = matching.confidence_scores(boxes, frames, gt, a)
    perm = [2, 0, 3, 1]
    frames_p = [frames[i] for i in perm]
    gt_p = [gt[i] for i in perm]
    conf_p = matching.confidence_scores(boxes, frames_p, gt_p, a)
    assert np.allclose(conf, conf_p, atol=1e-12)


def test_confidence_consistent_relabeling_invariance():
    rng = np.random.default_rng(2)
    boxes = [
        InstanceBox.static(rng.uniform(1, 2, 3), np.array([rng.uniform(-3, 3), 0.0, rng.uniform(8, 16)]))
        for _ in range(3)
    ]
    frames = [make_frame(time=t, translation=[0, 0, t]) for t in range(3)]
    gt = [[geometry.project_box(b, f) for b in boxes] for f in frames]
    q, _ = matching.matching_costs(boxes, frames, gt)
    conf = matching.confidence_scores(boxes, frames, gt, matching.hungarian(q))
    perm = [1, 2, 0]
    boxes_p = [boxes[i] for i in perm]
    gt_p = [[row[i] for i in perm] for row in gt]
    q_p, _ = matching.matching_costs(boxes_p, frames, gt_p)
    conf_p = matching.confidence_scores(boxes_p, frames, gt_p, matching.hungarian(q_p))
    assert np.allclose(sorted(conf), sorted(conf_p), atol=1e-12)


def test_pseudo_label_confidence_range():
    box = InstanceBox.static(np.ones(3), np.zeros(3))
    with pytest.raises(ValueError):
        matching.PseudoLabel(box=box, confidence=1.2, frame_id=0, instance_id=1)
    lab = matching.PseudoLabel(box=box, confidence=0.5, frame_id=0, instance_id=1)
    assert lab.confidence == 0.5
