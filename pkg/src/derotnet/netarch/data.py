"""Building training pools from annotations and proposals."""
from __future__ import annotations

import numpy as np

from derotnet.geometry import BBox, boxes_array, iou_matrix
from derotnet.netarch.samples import SamplePool, TrainingSample

POSITIVE_IOU = 0.5


def jitter_boxes(box: BBox, rng: np.random.Generator, n: int, shift: float = 0.12,
                 scale: float = 0.15, min_iou: float = 0.6) -> list[BBox]:
    """Random perturbations of ``box`` that keep IOU >= ``min_iou``."""
    out = []
    ref = np.array([box.as_tuple()])
    for _ in range(50 * n):
        if len(out) == n:
            break
        sw, sh = np.exp(rng.uniform(-scale, scale, 2))
        w, h = box.w * sw, box.h * sh
        cx = box.center[0] + rng.uniform(-shift, shift) * box.w
        cy = box.center[1] + rng.uniform(-shift, shift) * box.h
        cand = BBox(cx - w / 2, cy - h / 2, w, h)
        if iou_matrix(np.array([cand.as_tuple()]), ref)[0, 0] >= min_iou:
            out.append(cand)
    return out


def gt_samples(dataset, ids, rng: np.random.Generator | None = None, jitter: int = 0) -> list[TrainingSample]:
    """Ground-truth boxes (plus ``jitter`` perturbed copies each) as positives."""
    out = []
    for iid in ids:
        for box, angle in dataset.annotations(iid):
            out.append(TrainingSample(iid, box, 1, angle))
            if jitter and rng is not None:
                out.extend(TrainingSample(iid, b, 1, angle) for b in jitter_boxes(box, rng, jitter))
    return out


def label_proposals(dataset, iid: str, boxes: np.ndarray) -> tuple[list[TrainingSample], list[TrainingSample]]:
    """Split proposal boxes into positives (IOU > 0.5 with some ground truth,
    carrying its angle) and negatives."""
    ann = dataset.annotations(iid)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if not ann:
        return [], [TrainingSample(iid, BBox(*b), 0) for b in boxes]
    ov = iou_matrix(boxes, boxes_array([b for b, _ in ann]))
    best = ov.argmax(axis=1)
    pos, neg = [], []
    for b, j, o in zip(boxes, best, ov[np.arange(len(boxes)), best]):
        if o > POSITIVE_IOU:
            pos.append(TrainingSample(iid, BBox(*b), 1, ann[j][1]))
        else:
            neg.append(TrainingSample(iid, BBox(*b), 0))
    return pos, neg


def background_candidates(dataset, candidates: list, max_overlap: float) -> list:
    """Negatives whose IOU with every ground truth is at most ``max_overlap``.
    Shifted copies of a glyph are left to NMS rather than mined."""
    by_image: dict[str, list] = {}
    for s in candidates:
        by_image.setdefault(s.image_id, []).append(s)
    keep = []
    for iid, group in by_image.items():
        ann = dataset.annotations(iid)
        if not ann:
            keep.extend(group)
            continue
        ov = iou_matrix(boxes_array([s.box for s in group]), boxes_array([b for b, _ in ann])).max(axis=1)
        keep.extend(s for s, o in zip(group, ov) if o <= max_overlap)
    return keep


def detection_pool(dataset, ids, proposals: dict, rng: np.random.Generator,
                   pos_per_image: int = 24, neg_per_image: int = 48) -> tuple[list, list, list]:
    """Base positives (ground truths plus sampled positive proposals), sampled
    negatives, and every negative proposal (the mining candidates)."""
    positives, negatives, candidates = gt_samples(dataset, ids), [], []
    for iid in ids:
        boxes = np.array([p.box.as_tuple() for p in proposals.get(iid, [])]).reshape(-1, 4)
        pos, neg = label_proposals(dataset, iid, boxes)
        if len(pos) > pos_per_image:
            pos = [pos[i] for i in np.sort(rng.choice(len(pos), pos_per_image, replace=False))]
        positives.extend(pos)
        candidates.extend(neg)
        if len(neg) > neg_per_image:
            neg = [neg[i] for i in np.sort(rng.choice(len(neg), neg_per_image, replace=False))]
        negatives.extend(neg)
    return positives, negatives, candidates


def rotation_pool(positives: list[TrainingSample]) -> SamplePool:
    from derotnet.netarch.training import AugmentedPositives
    return SamplePool(AugmentedPositives(positives), [])


def grid_positives(dataset, ids, centers, window, min_iou: float = POSITIVE_IOU) -> list[TrainingSample]:
    """Every candidate-grid window overlapping a ground truth by more than
    ``min_iou``, labelled with that ground truth's angle. These follow the
    same box distribution as positive proposals."""
    from derotnet.proposals import enumerate_windows

    out = []
    for iid in ids:
        ann = dataset.annotations(iid)
        if not ann:
            continue
        h, w = dataset.image(iid).shape[:2]
        gt = boxes_array([b for b, _ in ann])
        for _, _, xs, ys, ww, hh in enumerate_windows(w, h, centers, window):
            gy, gx = np.meshgrid(ys, xs, indexing="ij")
            cand = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, ww), np.full(gx.size, hh)], axis=1)
            ov = iou_matrix(cand, gt)
            best = ov.argmax(axis=1)
            for b, j, o in zip(cand, best, ov[np.arange(len(cand)), best]):
                if o > min_iou:
                    out.append(TrainingSample(iid, BBox(*b), 1, ann[j][1]))
    return out
