"""Detection and rotation metrics: NMS, recall, MABO, AP, angular accuracy,
plus CSV/SVG/JSON export."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from derotnet.errors import DataError
from derotnet.geometry import BBox, boxes_array, iou, iou_matrix

__all__ = [
    "Detection", "PRCurve", "iou", "nms", "recall_at_iou", "mabo", "average_precision",
    "angular_distance", "rotation_accuracy", "false_positives_at_recall",
    "matched_angle_pairs", "proposal_angle_pairs", "write_pr_csv", "plot_pr_curves",
    "write_metrics_json",
]

ROTATION_DELTAS = (10.0, 20.0, 30.0)


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float
    angle_deg: float = 0.0
    image_id: str = ""

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"detection score must be finite, got {self.score}")

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "x": self.box.x, "y": self.box.y, "w": self.box.w,
                "h": self.box.h, "score": self.score, "angle_deg": self.angle_deg}


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    scores: np.ndarray        # score of the detection at each point
    tp: np.ndarray            # boolean, per ranked detection
    ap: float
    n_gt: int

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def _boxes(items) -> np.ndarray:
    """Accept BBoxes, objects with a ``box`` attribute, or an (n, 4) array."""
    if isinstance(items, np.ndarray):
        return items.reshape(-1, 4).astype(np.float64)
    return boxes_array([getattr(b, "box", b) for b in items])


def nms(detections: list, threshold: float = 0.3) -> list:
    """Greedy suppression in descending score order (earlier index wins ties).
    A box is dropped when its IOU with a kept box exceeds ``threshold``."""
    if not detections:
        return []
    scores = np.array([d.score for d in detections])
    order = np.lexsort((np.arange(len(scores)), -scores))
    ov = iou_matrix(_boxes(detections), _boxes(detections))
    kept: list[int] = []
    for i in order:
        if all(ov[i, j] <= threshold for j in kept):
            kept.append(int(i))
    return [detections[i] for i in kept]


def _per_gt_best(proposals: Mapping[str, object], ground_truths: Mapping[str, object]) -> np.ndarray:
    best = []
    for iid, gts in ground_truths.items():
        g = _boxes(gts)
        if not len(g):
            continue
        p = _boxes(proposals.get(iid, []))
        best.append(iou_matrix(g, p).max(axis=1) if len(p) else np.zeros(len(g)))
    if not best:
        raise DataError("no ground-truth boxes to evaluate against")
    return np.concatenate(best)


def recall_at_iou(proposals: Mapping[str, object], ground_truths: Mapping[str, object],
                  tau: float = 0.5) -> float:
    """Fraction of ground truths covered by some proposal with IOU >= tau."""
    return float((_per_gt_best(proposals, ground_truths) >= tau).mean())


def mabo(proposals: Mapping[str, object], ground_truths: Mapping[str, object]) -> float:
    """Mean best overlap over ground truths (one class, so MABO = ABO)."""
    return float(_per_gt_best(proposals, ground_truths).mean())


def _match(detections: list, ground_truths: Mapping[str, object], tau: float):
    """Greedy one-to-one matching in descending score order. Returns the
    ranking, a TP flag per ranked detection and the matched GT index."""
    scores = np.array([d.score for d in detections], dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    gt_boxes = {iid: _boxes(g) for iid, g in ground_truths.items()}
    used = {iid: np.zeros(len(b), bool) for iid, b in gt_boxes.items()}
    tp = np.zeros(len(order), bool)
    match = np.full(len(order), -1)
    for r, i in enumerate(order):
        d = detections[i]
        g = gt_boxes.get(d.image_id)
        if g is None or not len(g):
            continue
        ov = iou_matrix(np.array([d.box.as_tuple()]), g)[0]
        j = int(np.argmax(ov))
        if ov[j] >= tau and not used[d.image_id][j]:
            used[d.image_id][j] = True
            tp[r] = True
            match[r] = j
    return order, tp, match


def average_precision(detections: list, ground_truths: Mapping[str, object], tau: float = 0.5) -> PRCurve:
    """PASCAL-style AP: each detection claims its highest-IOU ground truth if
    that one is still unmatched and IOU >= tau; AP integrates the precision
    envelope over all recall points."""
    n_gt = sum(len(_boxes(g)) for g in ground_truths.values())
    if n_gt == 0:
        raise DataError("average precision is undefined without ground-truth boxes")
    order, tp, _ = _match(detections, ground_truths, tau)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    ap = float(np.sum((mrec[step] - mrec[step - 1]) * mpre[step]))
    scores = np.array([detections[i].score for i in order])
    return PRCurve(recall, precision, scores, tp, ap, n_gt)


def false_positives_at_recall(curve: PRCurve, target: float = 0.9) -> float:
    """False positives ranked above the point where recall first reaches
    ``target``; +inf if it never does."""
    hit = np.flatnonzero(curve.recall >= target - 1e-12)
    if not len(hit):
        return math.inf
    r = hit[0]
    return float(r + 1 - np.count_nonzero(curve.tp[:r + 1]))


def angular_distance(a, b) -> np.ndarray:
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % 360.0
    return np.minimum(d, 360.0 - d)


def rotation_accuracy(predicted, truth, deltas: Iterable[float] = ROTATION_DELTAS) -> dict[float, float]:
    """Fraction of pairs whose circular angle error is below each delta."""
    predicted = np.asarray(predicted, dtype=np.float64)
    if predicted.size == 0:
        raise DataError("rotation accuracy needs at least one angle pair")
    d = angular_distance(predicted, truth)
    return {float(t): float((d < t).mean()) for t in deltas}


def matched_angle_pairs(detections: list, ground_truths: Mapping[str, list], tau: float = 0.5):
    """(predicted, true) angles over true-positive matches. ``ground_truths``
    maps image ids to (BBox, angle) pairs."""
    boxes = {iid: [b for b, _ in g] for iid, g in ground_truths.items()}
    order, tp, match = _match(detections, boxes, tau)
    pred, true = [], []
    for r in np.flatnonzero(tp):
        d = detections[order[r]]
        pred.append(d.angle_deg)
        true.append(ground_truths[d.image_id][match[r]][1])
    return np.array(pred), np.array(true)


def proposal_angle_pairs(detections: list, ground_truths: Mapping[str, list], tau: float = 0.5):
    """(predicted, true) angles over every proposal overlapping a ground truth
    by more than ``tau`` (paired with its best-overlap ground truth)."""
    pred, true = [], []
    for d in detections:
        g = ground_truths.get(d.image_id) or []
        if not g:
            continue
        ov = iou_matrix(np.array([d.box.as_tuple()]), boxes_array([b for b, _ in g]))[0]
        j = int(np.argmax(ov))
        if ov[j] > tau:
            pred.append(d.angle_deg)
            true.append(g[j][1])
    return np.array(pred), np.array(true)


# ------------------------------------------------------------------- export


def write_pr_csv(path, curve: PRCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["score_threshold", "precision", "recall"])
        for s, p, r in zip(curve.scores, curve.precision, curve.recall):
            w.writerow([repr(float(s)), repr(float(p)), repr(float(r))])


def plot_pr_curves(path, curves: Mapping[str, PRCurve], title: str = "precision / recall") -> None:
    """Static SVG line plot, byte-stable across runs."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "derotnet", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        for name, c in curves.items():
            ax.plot(np.r_[0.0, c.recall], np.r_[1.0, c.precision], label=f"{name} (AP {c.ap:.3f})")
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_title(title)
        ax.grid(alpha=0.3)
        ax.legend(loc="lower left", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_metrics_json(path, metrics: dict) -> None:
    Path(path).write_text(json.dumps(_jsonable(metrics), indent=1, sort_keys=True) + "\n")
