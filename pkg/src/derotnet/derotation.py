"""Pose normalization, the derotation layer and the rotation loss.

Coordinates: x is the column, y the row (increasing downward), both measured
from the map center ((W-1)/2, (H-1)/2). A pose l = (cos a, sin a) maps a
source point p to the output point R_a p; the layer is computed by inverse
mapping, so output cell p' reads the input at R_a^T p'.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from derotnet.errors import NormalizationDegenerate, ShapeError
from derotnet.nn.tensor import Tensor, make_node

log = logging.getLogger(__name__)

GRID_HIT_TOL = 1e-9
SAMPLING_MODES = ("uniform", "bilinear")


@dataclass(frozen=True)
class RotationVector:
    c: float
    s: float
    cos: float
    sin: float

    @property
    def l(self) -> tuple[float, float]:
        return (self.cos, self.sin)

    @property
    def degrees(self) -> float:
        return math.degrees(math.atan2(self.sin, self.cos))

    def conjugate(self) -> "RotationVector":
        return RotationVector(self.c, -self.s, self.cos, -self.sin)


def normalize_pose(c: float, s: float) -> RotationVector:
    c, s = float(c), float(s)
    k = max(abs(c), abs(s))
    if k == 0.0:
        raise NormalizationDegenerate("cannot normalize the zero pose vector")
    # prescale so huge and subnormal inputs keep full precision
    u, v = c / k, s / k
    r = math.hypot(u, v)
    return RotationVector(c, s, u / r, v / r)


def pose_from_degrees(angle_deg: float) -> RotationVector:
    """Unit pose for an angle; multiples of 90 degrees are exact."""
    q, rem = divmod(float(angle_deg), 90.0)
    if rem == 0.0:
        cos, sin = ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[int(q) % 4]
    else:
        rad = math.radians(angle_deg)
        cos, sin = math.cos(rad), math.sin(rad)
    return RotationVector(cos, sin, cos, sin)


def wrap_degrees(angle_deg):
    """Map angles into [-180, 180)."""
    return (np.asarray(angle_deg, dtype=np.float64) + 180.0) % 360.0 - 180.0


def normalize_pose_batch(cs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise normalization; degenerate rows become the identity pose.

    Returns the (N, 2) unit poses and a boolean mask of degenerate rows.
    """
    cs = np.asarray(cs, dtype=np.float64)
    k = np.abs(cs).max(axis=1)
    bad = k == 0.0
    out = np.empty_like(cs)
    ok = ~bad
    scaled = cs[ok] / k[ok, None]
    out[ok] = scaled / np.hypot(scaled[:, 0], scaled[:, 1])[:, None]
    out[bad] = (1.0, 0.0)
    if bad.any():
        log.warning("%d degenerate pose vectors replaced by the identity pose", int(bad.sum()))
    return out, bad


# ---------------------------------------------------------------- derotation


@dataclass(frozen=True)
class DerotationRecord:
    """Per output cell: four source slots (flat index, -1 when out of bounds)
    and their weights, plus the fractional source coordinates."""

    height: int
    width: int
    index: np.ndarray    # (H*W, 4) int64
    weight: np.ndarray   # (H*W, 4) float64
    exact: np.ndarray    # (H*W,) bool, single-source grid hits
    x: np.ndarray        # (H*W,) source column
    y: np.ndarray        # (H*W,) source row
    pose: tuple[float, float]
    mode: str = "uniform"


def source_coordinates(height: int, width: int, pose) -> tuple[np.ndarray, np.ndarray]:
    cos, sin = _unit(pose)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64),
                             indexing="ij")
    u, v = (cols - cx).ravel(), (rows - cy).ravel()
    # R^T (u, v)
    return cx + cos * u + sin * v, cy - sin * u + cos * v


def _unit(pose) -> tuple[float, float]:
    if isinstance(pose, RotationVector):
        return pose.cos, pose.sin
    cos, sin = pose
    return float(cos), float(sin)


def _axis_slots(t: np.ndarray, tol: float):
    r = np.round(t)
    hit = np.abs(t - r) < tol
    lo = np.where(hit, r, np.floor(t))
    hi = np.where(hit, r, lo + 1.0)
    frac = np.where(hit, 0.0, t - lo)
    return lo.astype(np.int64), hi.astype(np.int64), hit, frac


def derotation_record(height: int, width: int, pose, mode: str = "uniform") -> DerotationRecord:
    if mode not in SAMPLING_MODES:
        raise ValueError(f"unknown sampling mode {mode!r}")
    x, y = source_coordinates(height, width, pose)
    x0, x1, hitx, fx = _axis_slots(x, GRID_HIT_TOL)
    y0, y1, hity, fy = _axis_slots(y, GRID_HIT_TOL)
    rows = np.stack([y0, y0, y1, y1], axis=1)
    cols = np.stack([x0, x1, x0, x1], axis=1)
    inside = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    index = np.where(inside, rows * width + cols, -1)
    if mode == "uniform":
        weight = np.full(index.shape, 0.25)
    else:
        wx = np.stack([1 - fx, fx, 1 - fx, fx], axis=1)
        wy = np.stack([1 - fy, 1 - fy, fy, fy], axis=1)
        # a collapsed axis duplicates its slot, so split that axis evenly
        wx = np.where(hitx[:, None], 0.5, wx)
        wy = np.where(hity[:, None], 0.5, wy)
        weight = wx * wy
    exact = hitx & hity & inside[:, 0]
    weight = np.where(inside, weight, 0.0)
    weight[exact] = (1.0, 0.0, 0.0, 0.0)
    index[exact, 1:] = -1
    for arr in (index, weight, exact, x, y):
        arr.setflags(write=False)
    return DerotationRecord(height, width, index, weight, exact, x, y, _unit(pose), mode)


def _apply_record(flat: np.ndarray, rec: DerotationRecord) -> np.ndarray:
    """Gather for one sample: ``flat`` is (C, H*W)."""
    safe = np.where(rec.index >= 0, rec.index, 0)
    g = flat[:, safe]                              # (C, P, 4)
    w = rec.weight
    acc = g[:, :, 0] * w[:, 0] + g[:, :, 1] * w[:, 1] + g[:, :, 2] * w[:, 2] + g[:, :, 3] * w[:, 3]
    direct = flat[:, safe[:, 0]]
    return np.where(rec.exact, direct, acc)


def _scatter_record(gflat: np.ndarray, rec: DerotationRecord) -> np.ndarray:
    c = gflat.shape[0]
    out = np.zeros((c, rec.height * rec.width))
    for k in range(4):
        valid = rec.index[:, k] >= 0
        idx = rec.index[valid, k]
        contrib = gflat[:, valid] * rec.weight[valid, k]
        np.add.at(out, (slice(None), idx), contrib)
    return out


def derotate_forward(feature, pose, mode: str = "uniform"):
    """Derotate a (C, H, W) or (N, C, H, W) array by one pose (or one per row).

    Returns ``(output, record)`` where ``record`` is a single record or a list
    with one record per batch row.
    """
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim == 3:
        rec = derotation_record(f.shape[1], f.shape[2], pose, mode)
        out = _apply_record(f.reshape(f.shape[0], -1), rec).reshape(f.shape)
        return out, rec
    if f.ndim != 4:
        raise ShapeError(f"derotate expects (C,H,W) or (N,C,H,W), got {f.shape}")
    n, c, h, w = f.shape
    poses = _pose_rows(pose, n)
    out = np.empty_like(f)
    records = []
    cache: dict[tuple[float, float], DerotationRecord] = {}
    for i in range(n):
        key = poses[i]
        rec = cache.get(key)
        if rec is None:
            rec = cache[key] = derotation_record(h, w, key, mode)
        records.append(rec)
        out[i] = _apply_record(f[i].reshape(c, -1), rec).reshape(c, h, w)
    return out, records


def _pose_rows(pose, n: int) -> list[tuple[float, float]]:
    if isinstance(pose, RotationVector) or (np.ndim(pose) == 1 and len(pose) == 2):
        return [_unit(pose)] * n
    arr = np.asarray([_unit(p) for p in pose], dtype=np.float64)
    if arr.shape != (n, 2):
        raise ShapeError(f"expected {n} poses, got {arr.shape[0]}")
    return [tuple(map(float, r)) for r in arr]


def derotate_backward(grad_out, record):
    g = np.asarray(grad_out, dtype=np.float64)
    if isinstance(record, DerotationRecord):
        if g.ndim != 3 or g.shape[1:] != (record.height, record.width):
            raise ShapeError(f"gradient {g.shape} does not match record {record.height}x{record.width}")
        return _scatter_record(g.reshape(g.shape[0], -1), record).reshape(g.shape)
    if g.ndim != 4 or len(record) != g.shape[0]:
        raise ShapeError(f"gradient {g.shape} does not match {len(record)} records")
    out = np.empty_like(g)
    for i, rec in enumerate(record):
        if g.shape[2:] != (rec.height, rec.width):
            raise ShapeError(f"gradient {g.shape} does not match record {rec.height}x{rec.width}")
        out[i] = _scatter_record(g[i].reshape(g.shape[1], -1), rec).reshape(g.shape[1:])
    return out


def _coordinate_grad(fmap: np.ndarray, rec: DerotationRecord) -> tuple[np.ndarray, np.ndarray]:
    """d out / d x and d out / d y of bilinear sampling, each (C, P)."""
    h, w = rec.height, rec.width
    x0 = np.floor(rec.x).astype(np.int64)
    y0 = np.floor(rec.y).astype(np.int64)
    fx, fy = rec.x - x0, rec.y - y0

    def at(r, c):
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        return np.where(ok, fmap[:, np.clip(r, 0, h - 1), np.clip(c, 0, w - 1)], 0.0)

    f00, f01 = at(y0, x0), at(y0, x0 + 1)
    f10, f11 = at(y0 + 1, x0), at(y0 + 1, x0 + 1)
    dx = (1 - fy) * (f01 - f00) + fy * (f11 - f10)
    dy = (1 - fx) * (f10 - f00) + fx * (f11 - f01)
    return dx, dy


def derotate(feature: Tensor, poses, mode: str = "uniform", raw_pose: Tensor | None = None) -> Tensor:
    """Autodiff derotation over a batch.

    Gradient flows to ``feature`` only, by scattering through the record.
    With ``raw_pose`` given (an (N, 2) tensor of unnormalized (c, s)) and
    bilinear sampling, the coordinate gradient is also propagated to the pose.
    """
    poses = np.asarray(poses, dtype=np.float64)
    out, records = derotate_forward(feature.values, poses, mode)
    if raw_pose is not None and mode != "bilinear":
        raise ValueError("pose gradients need bilinear sampling; uniform averaging is piecewise constant")
    parents = (feature,) if raw_pose is None else (feature, raw_pose)
    fvals = feature.values

    def backward(g):
        gf = derotate_backward(g, records) if feature.requires_grad else None
        if raw_pose is None:
            return (gf,)
        n, c, h, w = fvals.shape
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        u, v = (cols - cx).ravel(), (rows - cy).ravel()
        gp = np.zeros((n, 2))
        for i, rec in enumerate(records):
            dx, dy = _coordinate_grad(fvals[i].reshape(c, h, w), rec)
            gi = g[i].reshape(c, -1)
            gx, gy = (gi * dx).sum(axis=0), (gi * dy).sum(axis=0)
            # x = cx + cos*u + sin*v ; y = cy - sin*u + cos*v
            d_cos = (gx * u + gy * v).sum()
            d_sin = (gx * v - gy * u).sum()
            cr, sr = raw_pose.values[i]
            if cr == 0.0 and sr == 0.0:
                continue
            gp[i] = pose_jacobian(cr, sr).T @ np.array([d_cos, d_sin])
        return gf, gp

    return make_node(out, parents, backward, "derotate")


# ------------------------------------------------------------- rotation loss


def rotation_loss(l, l_star) -> float:
    a, b = _unit(l), _unit(l_star)
    return (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2


def pose_jacobian(c: float, s: float) -> np.ndarray:
    """[[dcos/dc, dcos/ds], [dsin/dc, dsin/ds]] of l = (c, s)/|(c, s)|."""
    r2 = c * c + s * s
    if r2 == 0.0:
        raise NormalizationDegenerate("pose Jacobian undefined at c = s = 0")
    inv1 = r2 ** -0.5
    inv3 = r2 ** -1.5
    return np.array([
        [inv1 - c * c * inv3, -c * s * inv3],
        [-c * s * inv3, inv1 - s * s * inv3],
    ])


def rotation_loss_backward(c: float, s: float, l_star) -> tuple[float, float]:
    """(dL/dc, dL/ds) for L = |normalize(c, s) - l*|^2."""
    l = normalize_pose(c, s)
    ts = _unit(l_star)
    dl = np.array([2.0 * (l.cos - ts[0]), 2.0 * (l.sin - ts[1])])
    g = pose_jacobian(float(c), float(s)).T @ dl
    return float(g[0]), float(g[1])


def rotation_loss_op(raw: Tensor, targets, mask=None) -> Tensor:
    """Mean rotation loss over the masked rows of an (N, 2) raw-output tensor.

    Rows outside ``mask`` (negatives) and degenerate rows contribute neither
    loss nor gradient; the mean divides by the number of contributing rows.
    """
    cs = raw.values
    n = cs.shape[0]
    targets = np.asarray(targets, dtype=np.float64).reshape(n, 2)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    poses, degenerate = normalize_pose_batch(cs)
    active = mask & ~degenerate
    count = int(active.sum())
    diff = poses - targets
    per_row = (diff ** 2).sum(axis=1)
    loss = per_row[active].sum() / count if count else 0.0

    def backward(g):
        grad = np.zeros_like(cs)
        for i in np.flatnonzero(active):
            grad[i] = rotation_loss_backward(cs[i, 0], cs[i, 1], targets[i])
        grad = masked_rotation_gradient(active, grad)
        return (grad * (float(g) / count) if count else grad,)

    node = make_node(np.array(loss), (raw,), backward, "rotation_loss")
    return node


def masked_rotation_gradient(is_positive, grads) -> np.ndarray:
    """Zero the per-sample rotation gradients of negatives; positives pass
    through unchanged."""
    is_positive = np.asarray(is_positive, dtype=bool)
    g = np.asarray(grads, dtype=np.float64)
    return np.where(is_positive.reshape((-1,) + (1,) * (g.ndim - 1)), g, 0.0)
