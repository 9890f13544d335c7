"""Brute-force reference implementations used only by the tests."""
from __future__ import annotations

import numpy as np

SCALE = 4  # integer boxes on a 1/4-pixel grid


def random_boxes(rng, n, extent=24):
    """Boxes with coordinates on a quarter-pixel grid."""
    x = rng.integers(0, extent * SCALE, n) / SCALE
    y = rng.integers(0, extent * SCALE, n) / SCALE
    w = rng.integers(SCALE, 10 * SCALE, n) / SCALE
    h = rng.integers(SCALE, 10 * SCALE, n) / SCALE
    return np.stack([x, y, w, h], axis=1)


def pixel_iou(a, b):
    """IOU by counting quarter-pixel cells."""
    size = int((max(a[0] + a[2], b[0] + b[2], a[1] + a[3], b[1] + b[3])) * SCALE) + 1
    grid = np.zeros((2, size, size), bool)
    for k, (x, y, w, h) in enumerate((a, b)):
        grid[k, int(round(y * SCALE)):int(round((y + h) * SCALE)), int(round(x * SCALE)):int(round((x + w) * SCALE))] = True
    inter = np.logical_and(grid[0], grid[1]).sum()
    union = np.logical_or(grid[0], grid[1]).sum()
    return inter / union


def plain_iou(a, b):
    iw = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    ih = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def nms_recursive(boxes, scores, thr):
    """Greedy definition, stated recursively: the best remaining box is kept
    and everything it overlaps beyond ``thr`` is removed."""
    idx = sorted(range(len(scores)), key=lambda i: (-scores[i], i))

    def go(rest):
        if not rest:
            return []
        head, tail = rest[0], rest[1:]
        return [head] + go([j for j in tail if plain_iou(boxes[head], boxes[j]) <= thr])
    return go(idx)


def best_overlaps(props, gts):
    out = []
    for iid, g in gts.items():
        for gb in g:
            out.append(max([plain_iou(gb, p) for p in props.get(iid, [])], default=0.0))
    return out


def greedy_match(dets, gts, tau):
    """dets: list of (image_id, box, score). Returns the TP flag per ranked
    detection, ranking by descending score then index."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], i))
    used = {iid: [False] * len(g) for iid, g in gts.items()}
    flags = []
    for i in order:
        iid, box, _ = dets[i]
        g = gts.get(iid, [])
        ovs = [plain_iou(box, gb) for gb in g]
        ok = False
        if ovs:
            j = max(range(len(ovs)), key=lambda k: (ovs[k], -k))
            if ovs[j] >= tau and not used[iid][j]:
                used[iid][j] = ok = True
        flags.append(ok)
    return flags


def ap_step_integration(flags, n_gt):
    """Area under the right-monotonized precision step curve, summed over
    every recall increment."""
    total, tp = 0.0, 0
    prec = []
    for k, f in enumerate(flags):
        tp += f
        prec.append(tp / (k + 1))
    for k, f in enumerate(flags):
        if f:
            total += max(prec[k:]) / n_gt
    return total


def circular_error(a, b):
    d = abs(a - b)
    while d >= 360:
        d -= 360
    return 360 - d if d > 180 else d
