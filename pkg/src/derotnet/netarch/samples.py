"""Training samples, patch extraction, augmentation and balanced batching."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from derotnet.derotation import derotate_forward, pose_from_degrees, wrap_degrees
from derotnet.geometry import BBox

N_ROTATIONS = 36
ROTATION_STEP_DEG = 10.0
_HIT_TOL = 1e-9


def sample_image(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Read an image at fractional (x=column, y=row) positions.

    Same rule as the derotation layer: the mean of the in-bounds four
    nearest grid neighbors (zero outside), a direct copy on exact grid hits.
    Returns (C, *xs.shape).
    """
    img = np.asarray(image, dtype=np.float64)
    chans = img[None] if img.ndim == 2 else img.transpose(2, 0, 1)
    c, h, w = chans.shape
    flat = chans.reshape(c, -1)
    shape = xs.shape
    xs, ys = xs.ravel(), ys.ravel()

    def slots(t):
        r = np.round(t)
        hit = np.abs(t - r) < _HIT_TOL
        lo = np.where(hit, r, np.floor(t)).astype(np.int64)
        hi = np.where(hit, lo, lo + 1)
        return lo, hi, hit

    x0, x1, hx = slots(xs)
    y0, y1, hy = slots(ys)
    acc = np.zeros((c, xs.size))
    for r, cc in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        ok = (r >= 0) & (r < h) & (cc >= 0) & (cc < w)
        idx = np.where(ok, r * w + cc, 0)
        acc += np.where(ok, flat[:, idx], 0.0) * 0.25
    exact = hx & hy & (x0 >= 0) & (x0 < w) & (y0 >= 0) & (y0 < h)
    direct = flat[:, np.where(exact, y0 * w + x0, 0)]
    out = np.where(exact, direct, acc)
    return out.reshape((c,) + shape)


def crop_side(box: BBox, context: float) -> float:
    return max(box.w, box.h) * context


def extract_patch(image: np.ndarray, box: BBox, size: int, context: float = 1.2,
                  rotation_deg: float = 0.0, flip: bool = False) -> np.ndarray:
    """Square patch centered on ``box``, optionally mirrored then rotated.

    Rotating by ``d`` produces P'(p) = P(R_d p), which raises the glyph's
    annotated angle by ``d``; mirroring negates it.
    """
    cx, cy = box.center
    step = crop_side(box, context) / size
    t = (np.arange(size) - (size - 1) / 2.0) * step
    v, u = np.meshgrid(t, t, indexing="ij")
    if rotation_deg:
        pose = pose_from_degrees(rotation_deg)
        u, v = pose.cos * u - pose.sin * v, pose.sin * u + pose.cos * v
    if flip:
        u = -u
    return sample_image(image, cx + u, cy + v)


@dataclass(frozen=True)
class TrainingSample:
    image_id: str
    box: BBox
    label: int                      # 1 positive, 0 negative
    angle_deg: float | None = None  # ground-truth angle of this (augmented) patch
    rotation_deg: float = 0.0       # augmentation rotation applied to the crop
    flipped: bool = False
    patch: np.ndarray | None = None

    @property
    def is_positive(self) -> bool:
        return self.label == 1

    @property
    def pose(self) -> tuple[float, float] | None:
        if self.angle_deg is None:
            return None
        p = pose_from_degrees(self.angle_deg)
        return (p.cos, p.sin)

    @property
    def key(self) -> tuple:
        return (self.image_id, self.box.as_tuple())


def augment(sample: TrainingSample, image: np.ndarray | None = None, size: int | None = None,
            context: float = 1.2) -> list[TrainingSample]:
    """36 rotations (10 degree steps) of the sample and of its mirror image.

    With ``image`` given, augmented samples are lazy descriptors that
    resample the source image; otherwise ``sample.patch`` is resampled.
    """
    if not sample.is_positive or sample.angle_deg is None:
        raise ValueError("only positive samples with a ground-truth angle are augmented")
    out = []
    for flip in (False, True):
        base = -sample.angle_deg if flip else sample.angle_deg
        for k in range(N_ROTATIONS):
            d = k * ROTATION_STEP_DEG
            angle = float(wrap_degrees(base + d))
            if image is not None:
                patch = extract_patch(image, sample.box, size, context, d, flip) if size else None
            elif sample.patch is not None:
                patch = rotate_patch(sample.patch, d, flip)
            else:
                patch = None
            out.append(replace(sample, angle_deg=angle, rotation_deg=d, flipped=flip, patch=patch))
    return out


def rotate_patch(patch: np.ndarray, rotation_deg: float, flip: bool = False) -> np.ndarray:
    """Patch-space version of the augmentation (no context beyond the crop)."""
    p = np.asarray(patch, dtype=np.float64)
    if flip:
        p = p[..., ::-1]
    if rotation_deg == 0.0:
        return np.ascontiguousarray(p)
    pose = pose_from_degrees(rotation_deg)
    # P'(p) = P(R_d p) is derotation by -d
    out, _ = derotate_forward(p if p.ndim == 3 else p[None], (pose.cos, -pose.sin))
    return out if p.ndim == 3 else out[0]


class PatchSource:
    """Renders sample patches from dataset images on demand."""

    def __init__(self, dataset, size: int, context: float):
        self.dataset = dataset
        self.size = size
        self.context = context

    def patch(self, s: TrainingSample) -> np.ndarray:
        if s.patch is not None:
            return s.patch
        return extract_patch(self.dataset.image(s.image_id), s.box, self.size, self.context,
                             s.rotation_deg, s.flipped)

    def batch(self, samples) -> np.ndarray:
        if not samples:
            return np.zeros((0, 1, self.size, self.size))
        return np.stack([self.patch(s) for s in samples])


# ------------------------------------------------------------------ batching


@dataclass
class SamplePool:
    positives: list[TrainingSample]
    negatives: list[TrainingSample]

    def __len__(self):
        return len(self.positives) + len(self.negatives)


class _Stream:
    """Cycles through a seeded permutation, reshuffling when exhausted."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        if self.n < k:
            return self.rng.integers(0, self.n, size=k)
        if self.pos + k > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        out = self.order[self.pos:self.pos + k]
        self.pos += k
        return out


class BalancedSampler:
    """Minibatches with exactly half positives, half negatives.

    Within a pass over a class each sample is drawn at most once; a class
    smaller than half a batch is drawn with replacement.
    """

    def __init__(self, pool: SamplePool, batch_size: int, rng: np.random.Generator,
                 positives_only: bool = False):
        if batch_size % 2 and not positives_only:
            raise ValueError(f"balanced batches need an even size, got {batch_size}")
        if not pool.positives or (not pool.negatives and not positives_only):
            raise ValueError("the pool must hold both positives and negatives")
        self.pool = pool
        self.batch_size = batch_size
        self.positives_only = positives_only
        self.pos = _Stream(len(pool.positives), rng)
        self.neg = _Stream(len(pool.negatives), rng) if pool.negatives else None

    def next(self) -> list[TrainingSample]:
        if self.positives_only:
            return [self.pool.positives[i] for i in self.pos.take(self.batch_size)]
        half = self.batch_size // 2
        return ([self.pool.positives[i] for i in self.pos.take(half)]
                + [self.pool.negatives[i] for i in self.neg.take(half)])


def sample_minibatch(pool: SamplePool, size: int, rng: np.random.Generator) -> list[TrainingSample]:
    return BalancedSampler(pool, size, rng).next()
