"""Discriminative region proposals.

Ground-truth boxes are grouped into aspect-ratio clusters; each cluster owns
a linear SVM over max-pooled shared-stack features and a score threshold
calibrated so that every validation box is covered at IOU >= 0.5.
Candidates come from a multi-scale sliding-window grid.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from derotnet.errors import CoverageError, DataError
from derotnet.geometry import BBox, boxes_array, iou_matrix
from derotnet.netarch.model import RotationAwareNet, frozen
from derotnet.netarch.samples import sample_image
from derotnet.nn import Tensor

log = logging.getLogger(__name__)

POOL_BINS = 3
FEATURE_STRIDE = 8


# ------------------------------------------------------------ aspect clusters


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.array(centers)[None]) ** 2, axis=1)
        total = d2.sum()
        if total == 0:
            break
        centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centers)


def lloyd_1d(x: np.ndarray, centers: np.ndarray, max_iter: int = 300) -> np.ndarray:
    c = np.sort(np.asarray(centers, dtype=np.float64))
    for _ in range(max_iter):
        assign = np.argmin(np.abs(x[:, None] - c[None]), axis=1)
        new = np.array([x[assign == j].mean() if np.any(assign == j) else c[j] for j in range(len(c))])
        new = np.sort(new)
        if np.array_equal(new, c):
            break
        c = new
    return c


def cluster_aspects(ratios, k: int = 8, seed: int = 0, restarts: int = 10) -> np.ndarray:
    """1-D k-means on log aspect ratio with k-means++ seeding.

    Returns ``k`` strictly increasing centers as ratios (w / h).
    """
    r = np.asarray([b.aspect if isinstance(b, BBox) else b for b in ratios], dtype=np.float64)
    if len(r) < k:
        raise DataError(f"need at least {k} boxes to form {k} aspect clusters, got {len(r)}")
    x = np.log(r)
    if len(np.unique(x)) < k:
        raise DataError(f"only {len(np.unique(x))} distinct aspect ratios for k={k}: "
                        "lower proposals.n_clusters in the config")
    rng = np.random.default_rng([seed, 0xA5])
    best, best_cost = None, np.inf
    for _ in range(restarts):
        c = lloyd_1d(x, _kmeans_pp_init(x, k, rng))
        cost = np.min((x[:, None] - c[None]) ** 2, axis=1).sum()
        if len(np.unique(c)) == k and cost < best_cost - 1e-15:
            best, best_cost = c, cost
    if best is None:
        raise DataError(f"k-means collapsed to duplicate centers for k={k}; lower proposals.n_clusters")
    return np.exp(best)


def assign_clusters(ratios, centers) -> np.ndarray:
    r = np.asarray([b.aspect if isinstance(b, BBox) else b for b in ratios], dtype=np.float64)
    return np.argmin(np.abs(np.log(r)[:, None] - np.log(np.asarray(centers))[None]), axis=1)


# -------------------------------------------------------------- window grid


@dataclass(frozen=True)
class WindowConfig:
    min_size: float = 16.0
    max_size: float = 64.0
    scale_factor: float = 2 ** 0.5
    stride_fraction: float = 0.25

    def scales(self) -> list[float]:
        out, s, i = [], self.min_size, 0
        while s <= self.max_size * (1 + 1e-9):
            out.append(s)
            i += 1
            s = self.min_size * self.scale_factor ** i
        return out


def window_dims(scale: float, aspect: float) -> tuple[float, float]:
    return scale * math.sqrt(aspect), scale / math.sqrt(aspect)


def axis_positions(extent: float, size: float, stride: float) -> np.ndarray:
    if size > extent:
        return np.zeros(0)
    n = int(math.floor((extent - size) / stride + 1e-9)) + 1
    return np.arange(n) * stride


def enumerate_windows(width: int, height: int, centers, config: WindowConfig):
    """Yield (scale index, cluster, xs, ys, w, h) blocks in (scale, y, x, cluster) order."""
    for si, s in enumerate(config.scales()):
        for k, a in enumerate(centers):
            w, h = window_dims(s, a)
            xs = axis_positions(width - 1, w, w * config.stride_fraction)
            ys = axis_positions(height - 1, h, h * config.stride_fraction)
            if len(xs) and len(ys):
                yield si, k, xs, ys, w, h


def count_windows(width: int, height: int, centers, config: WindowConfig) -> int:
    return sum(len(xs) * len(ys) for _, _, xs, ys, _, _ in enumerate_windows(width, height, centers, config))


# ----------------------------------------------------------------- features


class SparseTableMax:
    """O(1) rectangular max queries over a (C, H, W) map."""

    def __init__(self, fmap: np.ndarray):
        c, h, w = fmap.shape
        self.h, self.w = h, w
        self.levels_y = max(1, int(math.floor(math.log2(h))) + 1)
        self.levels_x = max(1, int(math.floor(math.log2(w))) + 1)
        rows = [fmap]
        for a in range(1, self.levels_y):
            prev, sh = rows[-1], 1 << (a - 1)
            nxt = prev.copy()
            nxt[:, :h - sh] = np.maximum(prev[:, :h - sh], prev[:, sh:])
            rows.append(nxt)
        self.table = []
        for base in rows:
            cols = [base]
            for b in range(1, self.levels_x):
                prev, sw = cols[-1], 1 << (b - 1)
                nxt = prev.copy()
                nxt[:, :, :w - sw] = np.maximum(prev[:, :, :w - sw], prev[:, :, sw:])
                cols.append(nxt)
            self.table.append(np.stack(cols))          # (Lx, C, H, W)
        self.table = np.stack(self.table)              # (Ly, Lx, C, H, W)

    def query(self, y0, y1, x0, x1) -> np.ndarray:
        """Max over inclusive ranges; inputs are equal-shape int arrays. Returns (..., C)."""
        a = np.floor(np.log2(y1 - y0 + 1)).astype(np.int64)
        b = np.floor(np.log2(x1 - x0 + 1)).astype(np.int64)
        ya, xb = y1 - (1 << a) + 1, x1 - (1 << b) + 1
        t = self.table
        m = np.maximum(np.maximum(t[a, b, :, y0, x0], t[a, b, :, y0, xb]),
                       np.maximum(t[a, b, :, ya, x0], t[a, b, :, ya, xb]))
        return m


def resize_image(image: np.ndarray, factor: float) -> np.ndarray:
    h, w = image.shape[:2]
    oh, ow = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    ys, xs = np.meshgrid(np.arange(oh) / factor, np.arange(ow) / factor, indexing="ij")
    return sample_image(image, xs, ys)


class FeaturePyramid:
    """Shared-stack feature maps of an image at one resize factor per scale.

    A window of base size ``s`` is seen at the factor that maps a crop of
    side ``s * context`` onto the network patch size, matching the scale of
    the training patches.
    """

    def __init__(self, image: np.ndarray, net: RotationAwareNet, scales, context: float):
        self.image = image
        self.factors = [net.config.patch_size / (s * context) for s in scales]
        self.tables = []
        with frozen(net.params):
            for f in self.factors:
                resized = resize_image(image, f)
                fmap = net.shared_map(Tensor(resized[None])).values[0]
                self.tables.append(SparseTableMax(fmap))

    def pooled(self, level: int, boxes: np.ndarray) -> np.ndarray:
        """3x3 max-pooled features for (n, 4) boxes at one pyramid level → (n, 9C)."""
        table, f = self.tables[level], self.factors[level]
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        scale = f / FEATURE_STRIDE
        fx, fy = boxes[:, 0] * scale, boxes[:, 1] * scale
        fw, fh = boxes[:, 2] * scale, boxes[:, 3] * scale
        feats = []
        for by in range(POOL_BINS):
            y0, y1 = _bin(fy, fh, by, table.h)
            for bx in range(POOL_BINS):
                x0, x1 = _bin(fx, fw, bx, table.w)
                feats.append(table.query(y0, y1, x0, x1))
        # (bins, n, C) -> (n, C * bins), channel-major like a flattened (C, 3, 3) map
        return np.stack(feats, axis=2).reshape(len(boxes), -1)


def _bin(start, extent, j, limit):
    lo = start + extent * j / POOL_BINS
    hi = start + extent * (j + 1) / POOL_BINS
    a = np.clip(np.floor(lo).astype(np.int64), 0, limit - 1)
    b = np.clip(np.ceil(hi).astype(np.int64) - 1, 0, limit - 1)
    return a, np.maximum(a, b)


def nearest_level(box: BBox, scales) -> int:
    s = math.sqrt(box.w * box.h)
    return int(np.argmin([abs(math.log(s / t)) for t in scales]))


def pooled_feature(image: np.ndarray, box: BBox, net: RotationAwareNet,
                   window: WindowConfig = WindowConfig(), context: float = 1.2,
                   pyramid: FeaturePyramid | None = None) -> np.ndarray:
    if not (box.w > 0 and box.h > 0):
        raise DataError(f"degenerate box {box}")
    scales = window.scales()
    pyramid = pyramid or FeaturePyramid(image, net, scales, context)
    return pyramid.pooled(nearest_level(box, scales), np.array([box.as_tuple()]))[0]


# --------------------------------------------------------------------- SVM


def svm_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, c: float) -> float:
    """0.5 |w|^2 + C * mean hinge."""
    margins = 1.0 - y * (x @ w + b)
    return 0.5 * float(w @ w) + c * float(np.maximum(margins, 0.0).mean())


def train_svm(x, y, c: float = 1.0, iterations: int = 3000) -> tuple[np.ndarray, float]:
    """L2-regularized hinge loss by full-batch subgradient descent.

    Steps follow 1/(lambda t) for the strongly convex part; the returned
    solution is the average of the second half of the iterates.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if set(np.unique(y)) != {-1.0, 1.0}:
        raise DataError("SVM training needs both +1 and -1 labels")
    n, d = x.shape
    w, b = np.zeros(d), 0.0
    w_avg, b_avg, n_avg = np.zeros(d), 0.0, 0
    start = iterations // 2
    for t in range(1, iterations + 1):
        active = y * (x @ w + b) < 1.0
        gw = w - c * (y[active, None] * x[active]).sum(axis=0) / n
        gb = -c * y[active].sum() / n
        eta = 1.0 / (t + 10.0)
        w = w - eta * gw
        b = b - eta * gb
        if t > start:
            n_avg += 1
            w_avg += (w - w_avg) / n_avg
            b_avg += (b - b_avg) / n_avg
    return w_avg, float(b_avg)


# -------------------------------------------------------------- the model


@dataclass
class Proposal:
    box: BBox
    score: float
    cluster: int
    image_id: str = ""

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "x": self.box.x, "y": self.box.y, "w": self.box.w,
                "h": self.box.h, "score": self.score, "cluster": self.cluster}


@dataclass
class AspectClusterModel:
    centers: np.ndarray
    weights: np.ndarray                  # (K, D) in standardized feature space
    biases: np.ndarray                   # (K,)
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    thresholds: np.ndarray = field(default=None)
    window: WindowConfig = WindowConfig()
    context: float = 1.2

    def score(self, feats: np.ndarray, cluster: int) -> np.ndarray:
        z = (feats - self.feature_mean) / self.feature_scale
        return z @ self.weights[cluster] + self.biases[cluster]

    def to_json(self) -> dict:
        return {
            "centers": self.centers.tolist(), "weights": self.weights.tolist(),
            "biases": self.biases.tolist(), "feature_mean": self.feature_mean.tolist(),
            "feature_scale": self.feature_scale.tolist(),
            "thresholds": None if self.thresholds is None else
            [t if math.isfinite(t) else None for t in self.thresholds.tolist()],
            "window": vars(self.window), "context": self.context,
        }

    @classmethod
    def from_json(cls, d: dict) -> "AspectClusterModel":
        th = d.get("thresholds")
        return cls(np.array(d["centers"]), np.array(d["weights"]), np.array(d["biases"]),
                   np.array(d["feature_mean"]), np.array(d["feature_scale"]),
                   None if th is None else np.array([np.inf if t is None else t for t in th]),
                   WindowConfig(**d["window"]), d["context"])

    def save(self, path, extra: dict | None = None) -> None:
        payload = self.to_json()
        payload.update(extra or {})
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "AspectClusterModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def score_windows(image: np.ndarray, net: RotationAwareNet, model: AspectClusterModel):
    """Score every grid window. Returns boxes (n, 4), scores (n,), clusters (n,)."""
    h, w = image.shape[:2]
    scales = model.window.scales()
    pyr = FeaturePyramid(image, net, scales, model.context)
    boxes, scores, clusters = [], [], []
    for si, k, xs, ys, ww, hh in enumerate_windows(w, h, model.centers, model.window):
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        b = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, ww), np.full(gx.size, hh)], axis=1)
        boxes.append(b)
        scores.append(model.score(pyr.pooled(si, b), k))
        clusters.append(np.full(len(b), k))
    if not boxes:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(boxes), np.concatenate(scores), np.concatenate(clusters)


def fit_proposal_model(dataset, image_ids, net: RotationAwareNet, n_clusters: int = 8,
                       window: WindowConfig = WindowConfig(), context: float = 1.2, c: float = 1.0,
                       neg_per_image: int = 480, seed: int = 0, iterations: int = 3000,
                       mining_rounds: int = 1, mining_cap: int = 4000) -> AspectClusterModel:
    """Cluster training boxes by aspect, then fit one SVM per cluster.

    Positives are the ground truths plus grid windows with IOU >= 0.6;
    negatives start as a random sample of windows with IOU < 0.3, and each
    mining round adds the negatives that violate the margin (score > -1).
    """
    rng = np.random.default_rng([seed, 0x5F3])
    gts = [(iid, b) for iid in image_ids for b, _ in dataset.annotations(iid)]
    centers = cluster_aspects([b for _, b in gts], n_clusters, seed)
    scales = window.scales()
    pos = [[] for _ in range(n_clusters)]
    neg_all = [[] for _ in range(n_clusters)]
    per_slot = max(1, neg_per_image // (len(scales) * n_clusters))
    chosen = [[] for _ in range(n_clusters)]
    for iid in image_ids:
        image = dataset.image(iid)
        h, w = image.shape[:2]
        pyr = FeaturePyramid(image, net, scales, context)
        gt = boxes_array([b for b, _ in dataset.annotations(iid)])
        for b in (b for i, b in gts if i == iid):
            k = assign_clusters([b], centers)[0]
            pos[k].append(pyr.pooled(nearest_level(b, scales), np.array([b.as_tuple()]))[0])
        for si, k, xs, ys, ww, hh in enumerate_windows(w, h, centers, window):
            gy, gx = np.meshgrid(ys, xs, indexing="ij")
            cand = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, ww), np.full(gx.size, hh)], axis=1)
            ov = iou_matrix(cand, gt).max(axis=1) if len(gt) else np.zeros(len(cand))
            good = cand[ov >= 0.6]
            if len(good):
                pos[k].extend(pyr.pooled(si, good))
            bad = cand[ov < 0.3]
            if len(bad):
                offset = sum(len(f) for f in neg_all[k])
                neg_all[k].append(pyr.pooled(si, bad))
                take = min(len(bad), per_slot)
                chosen[k].extend(offset + np.sort(rng.choice(len(bad), take, replace=False)))
    for k in range(n_clusters):
        if not pos[k] or not neg_all[k]:
            raise DataError(f"aspect cluster {k} has no {'positives' if not pos[k] else 'negatives'}")
    negs = [np.concatenate(f) for f in neg_all]
    active = [set(int(i) for i in ch) for ch in chosen]
    allf = np.concatenate([np.array(p) for p in pos] + [n[sorted(a)] for n, a in zip(negs, active)])
    mean = allf.mean(axis=0)
    scale = allf.std(axis=0) + 1e-6

    def fit(k):
        idx = sorted(active[k])
        xk = (np.concatenate([np.array(pos[k]), negs[k][idx]]) - mean) / scale
        yk = np.r_[np.ones(len(pos[k])), -np.ones(len(idx))]
        return train_svm(xk, yk, c, iterations)

    fits = [fit(k) for k in range(n_clusters)]
    for r in range(mining_rounds):
        added = 0
        for k in range(n_clusters):
            wk, bk = fits[k]
            scores = ((negs[k] - mean) / scale) @ wk + bk
            hard = [int(i) for i in np.argsort(-scores, kind="stable")
                    if scores[i] > -1.0 and int(i) not in active[k]][:mining_cap]
            if hard:
                active[k].update(hard)
                fits[k] = fit(k)
                added += len(hard)
        log.info("proposal SVM mining round %d: %d hard negatives", r + 1, added)
        if not added:
            break
    weights = np.array([f[0] for f in fits])
    biases = np.array([f[1] for f in fits])
    return AspectClusterModel(centers, weights, biases, mean, scale, window=window, context=context)


# -------------------------------------------------------------- calibration


def qualifying_scores(gt_boxes: np.ndarray, cand_boxes: np.ndarray, cand_scores: np.ndarray,
                      cand_clusters: np.ndarray, n_clusters: int, tau: float = 0.5) -> np.ndarray:
    """(G, K) maximum candidate score per cluster among candidates with IOU >= tau."""
    best = np.full((len(gt_boxes), n_clusters), -np.inf)
    if len(cand_boxes) == 0 or len(gt_boxes) == 0:
        return best
    ov = iou_matrix(gt_boxes, cand_boxes) >= tau
    for k in range(n_clusters):
        sel = cand_clusters == k
        if not sel.any():
            continue
        s = np.where(ov[:, sel], cand_scores[sel][None], -np.inf)
        best[:, k] = s.max(axis=1)
    return best


def calibrate_thresholds(best: np.ndarray, owners=None) -> np.ndarray:
    """Per-cluster thresholds keeping every ground truth covered.

    ``best[g, k]`` is the highest score of a cluster-k candidate covering
    ground truth g (-inf if none). Each ground truth is owned by one cluster
    (``owners``, normally its aspect cluster; by default the cluster where it
    scores highest), falling back to its best-scoring cluster when its own
    has no covering candidate. A cluster's threshold is the largest value
    that keeps all of its owned ground truths covered, i.e. the minimum of
    their best scores; clusters owning nothing get +inf.
    """
    best = np.asarray(best, dtype=np.float64)
    if best.ndim != 2:
        raise ValueError("best must be a (ground truths, clusters) matrix")
    g, k = best.shape
    if g == 0:
        log.warning("calibration set is empty; every threshold is +inf")
        return np.full(k, np.inf)
    uncovered = np.flatnonzero(~np.isfinite(best).any(axis=1))
    if len(uncovered):
        raise CoverageError(f"{len(uncovered)} ground truths have no candidate at the IOU threshold; "
                            "the window grid is too coarse", uncovered)
    owner = np.argmax(best, axis=1) if owners is None else np.asarray(owners, dtype=np.int64).copy()
    orphan = ~np.isfinite(best[np.arange(g), owner])
    owner[orphan] = np.argmax(best[orphan], axis=1)
    th = np.full(k, np.inf)
    for j in range(k):
        mine = owner == j
        if mine.any():
            th[j] = best[mine, j].min()
    return th


def generate_proposals(image: np.ndarray, net: RotationAwareNet, model: AspectClusterModel,
                       image_id: str = "") -> list[Proposal]:
    boxes, scores, clusters = score_windows(image, net, model)
    keep = scores >= model.thresholds[clusters]
    return [Proposal(BBox(*b), float(s), int(c), image_id)
            for b, s, c in zip(boxes[keep], scores[keep], clusters[keep])]


def write_proposals(path, proposals: list[Proposal], header: dict | None = None) -> None:
    lines = []
    if header is not None:
        lines.append(json.dumps({"header": header}, sort_keys=True))
    lines += [json.dumps(p.to_json(), sort_keys=True) for p in proposals]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_proposals(path) -> tuple[dict[str, list[Proposal]], dict]:
    out: dict[str, list[Proposal]] = {}
    header = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if "header" in d:
            header = d["header"]
            continue
        p = Proposal(BBox(d["x"], d["y"], d["w"], d["h"]), d["score"], d["cluster"], d["image_id"])
        out.setdefault(p.image_id, []).append(p)
    return out, header
