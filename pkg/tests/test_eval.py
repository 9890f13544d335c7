import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from derotnet import eval as ev
from derotnet.errors import DataError
from derotnet.geometry import BBox, iou, iou_matrix

from oracles import (
    ap_step_integration, best_overlaps, circular_error, greedy_match, nms_recursive, pixel_iou, plain_iou,
    random_boxes,
)

seeds = st.integers(0, 2**31)


def dets_from(boxes, scores, iid="a", angles=None):
    angles = np.zeros(len(boxes)) if angles is None else angles
    return [ev.Detection(BBox(*b), float(s), float(t), iid) for b, s, t in zip(boxes, scores, angles)]


# ---------------------------------------------------------------- iou

def test_iou_examples():
    a = BBox(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(5, 5, 1, 1)) == 0.0
    assert iou(a, BBox(1, 0, 2, 2)) == pytest.approx(1 / 3, abs=1e-15)
    assert pixel_iou((0, 0, 2, 2), (1, 0, 2, 2)) == pytest.approx(1 / 3, abs=1e-15)


@given(seeds)
def test_iou_matches_pixel_count(seed):
    rng = np.random.default_rng(seed)
    a, b = random_boxes(rng, 2)
    assert abs(iou(BBox(*a), BBox(*b)) - pixel_iou(a, b)) < 1e-12
    assert abs(iou_matrix(a, b)[0, 0] - pixel_iou(a, b)) < 1e-12


@given(seeds, st.floats(-50, 50), st.floats(-50, 50))
def test_iou_symmetry_and_translation(seed, dx, dy):
    a, b = random_boxes(np.random.default_rng(seed), 2)
    assert iou(BBox(*a), BBox(*b)) == iou(BBox(*b), BBox(*a))
    shifted = iou(BBox(a[0] + dx, a[1] + dy, a[2], a[3]), BBox(b[0] + dx, b[1] + dy, b[2], b[3]))
    assert shifted == pytest.approx(iou(BBox(*a), BBox(*b)), abs=1e-12)


def test_bbox_validation():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 1)


# ---------------------------------------------------------------- nms

def test_nms_examples():
    one = dets_from([(0, 0, 2, 2)], [0.4])
    assert ev.nms(one, 0.5) == one
    pair = dets_from([(0, 0, 2, 2), (0, 0, 2, 2)], [0.8, 0.9])
    assert [d.score for d in ev.nms(pair, 0.5)] == [0.9]
    assert ev.nms([], 0.5) == []


@given(seeds, st.sampled_from([0.1, 0.3, 0.5, 0.7]))
def test_nms_matches_recursive_oracle(seed, thr):
    rng = np.random.default_rng(seed)
    boxes = random_boxes(rng, 8, extent=10)
    scores = rng.integers(0, 4, 8) / 4.0  # ties exercise the index tie-break
    dets = dets_from(boxes, scores)
    kept = ev.nms(dets, thr)
    assert [dets.index(d) for d in kept] == nms_recursive(boxes, scores, thr)
    kb = [d.box for d in kept]
    for i in range(len(kb)):
        for j in range(i + 1, len(kb)):
            assert iou(kb[i], kb[j]) <= thr


# ---------------------------------------------------------------- recall / mabo

def test_recall_examples():
    gts = {"a": [BBox(0, 0, 4, 4), BBox(10, 10, 4, 4)], "b": [BBox(0, 0, 3, 3)]}
    assert ev.recall_at_iou(gts, gts) == 1.0
    assert ev.recall_at_iou({}, gts) == 0.0
    props = {"a": [BBox(0, 0, 4, 4)], "b": [BBox(0, 0, 3, 3)]}
    assert ev.recall_at_iou(props, gts) == pytest.approx(2 / 3)
    with pytest.raises(DataError):
        ev.recall_at_iou(props, {"a": []})


def test_mabo_examples():
    gts = {"a": [BBox(0, 0, 10, 10)]}
    assert ev.mabo(gts, gts) == 1.0
    assert ev.mabo({"a": [BBox(0, 0, 4, 10)]}, gts) == pytest.approx(0.4)
    with pytest.raises(DataError):
        ev.mabo({}, {})


def _instance(rng):
    gts, props = {}, {}
    for iid in ("a", "b", "c")[:rng.integers(1, 4)]:
        gts[iid] = [BBox(*b) for b in random_boxes(rng, rng.integers(1, 4), 12)]
        props[iid] = [BBox(*b) for b in random_boxes(rng, rng.integers(0, 5), 12)]
    return gts, props


@given(seeds, st.sampled_from([0.3, 0.5, 0.7]))
def test_recall_mabo_match_oracle(seed, tau):
    gts, props = _instance(np.random.default_rng(seed))
    g = {k: [b.as_tuple() for b in v] for k, v in gts.items()}
    p = {k: [b.as_tuple() for b in v] for k, v in props.items()}
    best = best_overlaps(p, g)
    assert abs(ev.mabo(props, gts) - np.mean(best)) < 1e-12
    assert abs(ev.recall_at_iou(props, gts, tau) - np.mean([b >= tau for b in best])) < 1e-12


@given(seeds)
def test_adding_a_proposal_is_monotone(seed):
    rng = np.random.default_rng(seed)
    gts, props = _instance(rng)
    iid = next(iter(gts))
    more = dict(props)
    more[iid] = list(props.get(iid, [])) + [BBox(*random_boxes(rng, 1, 12)[0])]
    assert ev.recall_at_iou(more, gts) >= ev.recall_at_iou(props, gts)
    assert ev.mabo(more, gts) >= ev.mabo(props, gts)


# ---------------------------------------------------------------- AP

def test_ap_perfect_and_all_false():
    gts = {"a": [BBox(0, 0, 4, 4), BBox(10, 10, 4, 4)]}
    perfect = dets_from([b.as_tuple() for b in gts["a"]], [0.9, 0.8])
    assert ev.average_precision(perfect, gts).ap == 1.0
    wrong = dets_from([(30, 30, 2, 2), (40, 40, 2, 2)], [0.9, 0.8])
    assert ev.average_precision(wrong, gts).ap == 0.0
    with pytest.raises(DataError):
        ev.average_precision(perfect, {"a": []})


def test_ap_hand_instance():
    gt = [(0, 0, 4, 4), (10, 0, 4, 4), (20, 0, 4, 4)]
    boxes = [gt[0], gt[1], (40, 40, 2, 2), gt[2], (50, 50, 2, 2)]
    curve = ev.average_precision(dets_from(boxes, [0.9, 0.8, 0.7, 0.6, 0.5]), {"a": [BBox(*b) for b in gt]})
    # TP TP FP TP FP: precision 1, 1, 2/3, 3/4, 3/5
    assert curve.ap == pytest.approx((1 + 1 + 0.75) / 3, abs=1e-12)
    assert curve.ap == pytest.approx(ap_step_integration([True, True, False, True, False], 3), abs=1e-12)
    assert np.all(np.diff(curve.recall) >= 0)


def _det_instance(rng):
    gts, dets = {}, []
    for iid in ("a", "b")[:rng.integers(1, 3)]:
        g = random_boxes(rng, rng.integers(1, 4), 12)
        gts[iid] = [tuple(b) for b in g]
        for b in g:
            if rng.random() < 0.7:
                jitter = b + np.r_[rng.integers(-4, 5, 2) / 4, 0, 0]
                dets.append((iid, tuple(jitter), float(rng.random())))
        for b in random_boxes(rng, rng.integers(0, 4), 12):
            dets.append((iid, tuple(b), float(rng.random())))
    return gts, dets[:10]


def _as_eval(gts, dets):
    return ({k: [BBox(*b) for b in v] for k, v in gts.items()},
            [ev.Detection(BBox(*b), s, 0.0, iid) for iid, b, s in dets])


@given(seeds, st.sampled_from([0.3, 0.5]))
def test_ap_matches_oracle(seed, tau):
    gts, dets = _det_instance(np.random.default_rng(seed))
    g, d = _as_eval(gts, dets)
    curve = ev.average_precision(d, g, tau)
    flags = greedy_match(dets, gts, tau)
    assert list(curve.tp) == flags
    n_gt = sum(len(v) for v in gts.values())
    assert abs(curve.ap - ap_step_integration(flags, n_gt)) < 1e-12
    assert 0.0 <= curve.ap <= 1.0


@given(seeds)
def test_ap_invariant_under_monotone_score_transform(seed):
    gts, dets = _det_instance(np.random.default_rng(seed))
    g, d = _as_eval(gts, dets)
    squashed = [ev.Detection(x.box, math.tanh(3 * x.score) ** 3, 0.0, x.image_id) for x in d]
    assert ev.average_precision(d, g).ap == ev.average_precision(squashed, g).ap


def test_fp_at_recall():
    gt = {"a": [BBox(0, 0, 4, 4), BBox(10, 0, 4, 4)]}
    d = dets_from([(40, 40, 2, 2), (0, 0, 4, 4), (50, 50, 2, 2), (10, 0, 4, 4)], [0.9, 0.8, 0.7, 0.6])
    curve = ev.average_precision(d, gt)
    assert ev.false_positives_at_recall(curve, 0.5) == 1
    assert ev.false_positives_at_recall(curve, 1.0) == 2
    short = ev.average_precision(d[:2], gt)
    assert ev.false_positives_at_recall(short, 0.9) == math.inf


def test_detection_rejects_non_finite_score():
    with pytest.raises(ValueError):
        ev.Detection(BBox(0, 0, 1, 1), float("nan"))


# ---------------------------------------------------------------- rotation accuracy

def test_rotation_accuracy_examples():
    assert ev.rotation_accuracy([10, 20], [10, 20]) == {10.0: 1.0, 20.0: 1.0, 30.0: 1.0}
    assert ev.rotation_accuracy([180], [0]) == {10.0: 0.0, 20.0: 0.0, 30.0: 0.0}
    assert ev.rotation_accuracy([355], [0]) == {10.0: 1.0, 20.0: 1.0, 30.0: 1.0}
    assert ev.rotation_accuracy([20], [0])[20.0] == 0.0  # strictly below delta
    with pytest.raises(DataError):
        ev.rotation_accuracy([], [])


@given(st.lists(st.tuples(st.floats(-720, 720), st.floats(-180, 180)), min_size=1, max_size=10))
def test_rotation_accuracy_matches_oracle(pairs):
    p, t = np.array(pairs).T
    acc = ev.rotation_accuracy(p, t)
    for delta in (10.0, 20.0, 30.0):
        want = np.mean([circular_error(a, b) < delta for a, b in pairs])
        assert abs(acc[delta] - want) < 1e-12
    assert acc[10.0] <= acc[20.0] <= acc[30.0]


def test_angle_pairing_modes():
    gts = {"a": [(BBox(0, 0, 10, 10), 30.0)]}
    d = [ev.Detection(BBox(0, 0, 10, 10), 0.9, 25.0, "a"), ev.Detection(BBox(1, 0, 10, 10), 0.8, 50.0, "a")]
    pred, true = ev.matched_angle_pairs(d, gts)
    assert pred.tolist() == [25.0] and true.tolist() == [30.0]
    pred, true = ev.proposal_angle_pairs(d, gts)
    assert pred.tolist() == [25.0, 50.0] and true.tolist() == [30.0, 30.0]


# ---------------------------------------------------------------- export

def test_exports_are_deterministic(tmp_path):
    gt = {"a": [BBox(0, 0, 4, 4)]}
    curve = ev.average_precision(dets_from([(0, 0, 4, 4), (9, 9, 2, 2)], [0.9, 0.2]), gt)
    outs = []
    for k in range(2):
        d = tmp_path / str(k)
        d.mkdir()
        ev.write_pr_csv(d / "pr.csv", curve)
        ev.plot_pr_curves(d / "pr.svg", {"m": curve})
        ev.write_metrics_json(d / "m.json", {"ap": curve.ap, "fp": math.inf})
        outs.append([(d / f).read_bytes() for f in ("pr.csv", "pr.svg", "m.json")])
    assert outs[0] == outs[1]
    assert outs[0][0].decode().splitlines()[0] == "score_threshold,precision,recall"
    assert b"<svg" in outs[0][1]
    assert b'"fp": null' in outs[0][2]
