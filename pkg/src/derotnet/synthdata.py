"""Synthetic oriented-glyph detection scenes.

Targets are a jittered "T with a thumb" polygon, asymmetric under every
rotation and under mirroring, so its in-plane angle is well defined.
Distractors are rotationally symmetric shapes and noisy blobs.

A glyph drawn with angle ``a`` satisfies ``image(c + p) = G(R_a p)`` for the
canonical upright glyph ``G``; derotating a centered crop by
``pose_from_degrees(a)`` therefore recovers ``G``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from derotnet.derotation import pose_from_degrees, wrap_degrees
from derotnet.errors import DataError
from derotnet.geometry import BBox, iou

MANIFEST_FORMAT = "derotnet-manifest"
MANIFEST_VERSION = 1
MAX_REJECTIONS = 1000

# canonical glyph in units of its size, origin at the rotation center,
# y increasing downward; crossbar on top, thumb on the right of the stem
GLYPH_VERTICES = np.array([
    (-0.50, -0.50), (0.50, -0.50), (0.50, -0.22), (0.13, -0.22),
    (0.13, 0.02), (0.38, 0.02), (0.38, 0.20), (0.13, 0.20),
    (0.13, 0.50), (-0.13, 0.50), (-0.13, -0.22), (-0.50, -0.22),
])

SKIN_TONES = np.array([(0.87, 0.67, 0.53), (0.76, 0.55, 0.42), (0.55, 0.38, 0.26)])


@dataclass
class SceneConfig:
    image_size: int = 128
    glyph_count: tuple[int, int] = (1, 3)
    glyph_size: tuple[float, float] = (20.0, 30.0)
    distractor_count: tuple[int, int] = (2, 5)
    noise: float = 0.06
    max_glyph_iou: float = 0.3
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        self.glyph_count = tuple(int(v) for v in self.glyph_count)
        self.glyph_size = tuple(float(v) for v in self.glyph_size)
        self.distractor_count = tuple(int(v) for v in self.distractor_count)
        for name in ("glyph_count", "glyph_size", "distractor_count"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise DataError(f"{name} range {lo}..{hi} is empty")
        if self.glyph_size[0] <= 2:
            raise DataError("glyph_size must exceed 2 pixels")
        if self.channels not in (1, 3):
            raise DataError("channels must be 1 (PGM) or 3 (PPM)")


@dataclass
class Annotation:
    box: BBox
    angle_deg: float
    label: str = "glyph"
    center: tuple[float, float] = (0.0, 0.0)
    size: float = 0.0

    def to_json(self) -> dict:
        return {"x": self.box.x, "y": self.box.y, "w": self.box.w, "h": self.box.h,
                "angle_deg": self.angle_deg}


@dataclass
class Scene:
    image: np.ndarray                     # (H, W) or (H, W, 3), values in [0, 1]
    annotations: list[Annotation] = field(default_factory=list)


class Rejected(Exception):
    """Placement did not fit; the caller should draw a new position."""


# ----------------------------------------------------------------- geometry


def points_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule, vectorized over query points."""
    inside = np.zeros(px.shape, dtype=bool)
    xs, ys = poly[:, 0], poly[:, 1]
    n = len(poly)
    for i in range(n):
        x1, y1, x2, y2 = xs[i], ys[i], xs[(i + 1) % n], ys[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def glyph_polygon(size: float, rng: np.random.Generator | None = None, jitter: float = 0.03) -> np.ndarray:
    poly = GLYPH_VERTICES.copy()
    if rng is not None and jitter > 0:
        poly = poly + rng.uniform(-jitter, jitter, poly.shape)
    return poly * size


def rotated_polygon(poly: np.ndarray, angle_deg: float) -> np.ndarray:
    """Vertices q with R_a q in ``poly``: the drawn outline for angle ``a``."""
    pose = pose_from_degrees(angle_deg)
    c, s = pose.cos, pose.sin
    # R_a^T applied to each vertex
    return np.stack([c * poly[:, 0] + s * poly[:, 1], -s * poly[:, 0] + c * poly[:, 1]], axis=1)


def glyph_mask(shape: tuple[int, int], center, poly: np.ndarray, angle_deg: float) -> np.ndarray:
    """Pixels (centers at integer coordinates) covered by the glyph."""
    h, w = shape
    pose = pose_from_degrees(angle_deg)
    c, s = pose.cos, pose.sin
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = cols - center[0], rows - center[1]
    # canonical coordinates R_a (u, v)
    return points_in_polygon(c * u - s * v, s * u + c * v, poly)


def canonical_template(size: float, patch: int, poly: np.ndarray | None = None) -> np.ndarray:
    poly = glyph_polygon(size) if poly is None else poly
    half = (patch - 1) / 2.0
    return glyph_mask((patch, patch), (half, half), poly, 0.0).astype(np.float64)


# ---------------------------------------------------------------- rendering


def _place_glyph(shape, center, size, angle_deg, rng, annotations=(), masks=(), max_iou=1.0):
    h, w = shape
    poly = glyph_polygon(size, rng)
    drawn = rotated_polygon(poly, angle_deg) + np.asarray(center, dtype=np.float64)
    (x0, y0), (x1, y1) = drawn.min(axis=0), drawn.max(axis=0)
    if x0 < 0 or y0 < 0 or x1 > w - 1 or y1 > h - 1:
        raise Rejected
    box = BBox(float(x0), float(y0), float(x1 - x0), float(y1 - y0))
    if any(iou(box, a.box) > max_iou for a in annotations):
        raise Rejected
    mask = glyph_mask((h, w), center, poly, angle_deg)
    if any((mask & m).any() for m in masks):
        raise Rejected
    ann = Annotation(box, float(wrap_degrees(angle_deg)), center=(float(center[0]), float(center[1])),
                     size=float(size))
    return ann, mask


def render_glyph(canvas: np.ndarray, center, size: float, angle_deg: float,
                 rng: np.random.Generator, intensity=None) -> Annotation:
    """Draw one glyph in place and return its annotation.

    Raises ``Rejected`` when the rotated glyph would leave the canvas.
    """
    ann, mask = _place_glyph(canvas.shape[:2], center, size, angle_deg, rng)
    canvas[mask] = rng.uniform(0.6, 0.95) if intensity is None else intensity
    return ann


def _draw_distractor(canvas: np.ndarray, kind: str, center, size: float, rng, value) -> None:
    h, w = canvas.shape[:2]
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = cols - center[0], rows - center[1]
    r = size / 2.0
    if kind == "disk":
        mask = u * u + v * v <= r * r
    elif kind == "ring":
        d2 = u * u + v * v
        mask = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    elif kind == "square":
        mask = (np.abs(u) <= r * 0.8) & (np.abs(v) <= r * 0.8)
    elif kind == "cross":
        arm = 0.22 * r
        mask = ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    elif kind == "blob":
        a, b = r, r * rng.uniform(0.5, 0.9)
        th = rng.uniform(0, np.pi)
        uu = np.cos(th) * u + np.sin(th) * v
        vv = -np.sin(th) * u + np.cos(th) * v
        mask = (uu / a) ** 2 + (vv / b) ** 2 <= 1.0
        texture = rng.normal(0.0, 0.12, canvas.shape[:2])
        canvas[mask] = np.clip(np.asarray(value) + texture[mask][..., None] if canvas.ndim == 3
                               else value + texture[mask], 0, 1)
        return
    else:
        raise ValueError(kind)
    canvas[mask] = value


DISTRACTOR_KINDS = ("disk", "ring", "square", "cross", "blob")


def render_scene(config: SceneConfig, index: int) -> Scene:
    rng = np.random.default_rng([config.seed, index])
    n = config.image_size
    shape = (n, n) if config.channels == 1 else (n, n, 3)
    base = rng.uniform(0.1, 0.35)
    gy, gx = rng.uniform(-0.1, 0.1, 2)
    rows, cols = np.mgrid[0:n, 0:n] / n
    background = base + gy * (rows - 0.5) + gx * (cols - 0.5)
    canvas = np.empty(shape)
    if config.channels == 1:
        canvas[:] = background
    else:
        tint = rng.uniform(0.7, 1.0, 3)
        canvas[:] = background[..., None] * tint

    def ink():
        if config.channels == 1:
            return rng.uniform(0.6, 0.95)
        return SKIN_TONES[rng.integers(len(SKIN_TONES))] * rng.uniform(0.85, 1.1)

    n_glyphs = int(rng.integers(config.glyph_count[0], config.glyph_count[1] + 1))
    annotations: list[Annotation] = []
    masks: list[np.ndarray] = []
    for _ in range(n_glyphs):
        for _attempt in range(MAX_REJECTIONS):
            size = rng.uniform(*config.glyph_size)
            angle = rng.uniform(-180.0, 180.0)
            center = (float(rng.integers(0, n)), float(rng.integers(0, n)))
            try:
                ann, mask = _place_glyph((n, n), center, size, angle, rng, annotations, masks,
                                         config.max_glyph_iou)
            except Rejected:
                continue
            canvas[mask] = ink()
            masks.append(mask)
            annotations.append(ann)
            break
        else:
            raise DataError(f"image {index}: could not place glyph {len(annotations) + 1} "
                            f"after {MAX_REJECTIONS} rejections; lower glyph_count or glyph_size")

    n_distractors = int(rng.integers(config.distractor_count[0], config.distractor_count[1] + 1))
    for _ in range(n_distractors):
        kind = DISTRACTOR_KINDS[rng.integers(len(DISTRACTOR_KINDS))]
        value = ink()
        for _attempt in range(50):
            size = rng.uniform(*config.glyph_size)
            center = rng.uniform(size / 2, n - 1 - size / 2, 2)
            box = BBox(center[0] - size / 2 - 2, center[1] - size / 2 - 2, size + 4, size + 4)
            if any(iou(box, a.box) > 0.0 for a in annotations):
                continue
            _draw_distractor(canvas, kind, center, size, rng, value)
            break

    canvas = canvas + rng.normal(0.0, config.noise, canvas.shape)
    return Scene(np.clip(canvas, 0.0, 1.0), annotations)


# ----------------------------------------------------------------- file I/O


def write_pnm(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if img.ndim == 2 else b"P6"
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DataError(f"{path}: unsupported image format")
    ch = 1 if magic == b"P5" else 3
    data = np.frombuffer(raw[pos:pos + w * h * ch], dtype=np.uint8)
    shape = (h, w) if ch == 1 else (h, w, 3)
    return data.reshape(shape).astype(np.float64) / 255.0


def assign_splits(glyph_counts: dict[str, int], seed: int) -> dict[str, list[str]]:
    """60/20/20 by image, stratified by glyph count.

    Images are ordered by (glyph count, seeded shuffle) and dealt in a
    repeating train/train/train/val/test pattern.
    """
    rng = np.random.default_rng([seed, 0x5917])
    ids = sorted(glyph_counts)
    keys = rng.permutation(len(ids))
    order = sorted(range(len(ids)), key=lambda i: (glyph_counts[ids[i]], keys[i]))
    pattern = ("train", "train", "train", "val", "test")
    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for rank, i in enumerate(order):
        splits[pattern[rank % 5]].append(ids[i])
    return {k: sorted(v) for k, v in splits.items()}


def image_id(index: int) -> str:
    return f"img_{index:05d}"


def generate_dataset(config: SceneConfig, n_images: int, out_dir) -> Path:
    """Write images, ``manifest.jsonl`` and ``splits.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    ext = "pgm" if config.channels == 1 else "ppm"
    header = {"header": {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
                         "n_images": n_images, "scene_config": asdict(config)}}
    lines = [json.dumps(header, sort_keys=True)]
    counts = {}
    for i in range(n_images):
        scene = render_scene(config, i)
        iid = image_id(i)
        rel = f"images/{iid}.{ext}"
        write_pnm(out / rel, scene.image)
        counts[iid] = len(scene.annotations)
        lines.append(json.dumps({"image_id": iid, "path": rel,
                                 "annotations": [a.to_json() for a in scene.annotations]}, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    splits = assign_splits(counts, config.seed)
    (out / "splits.json").write_text(json.dumps(splits, indent=1, sort_keys=True) + "\n")
    return out / "manifest.jsonl"


@dataclass
class Dataset:
    root: Path
    records: dict[str, dict]
    splits: dict[str, list[str]]
    header: dict
    _cache: dict = field(default_factory=dict, repr=False)

    def image(self, iid: str) -> np.ndarray:
        img = self._cache.get(iid)
        if img is None:
            img = self._cache[iid] = read_pnm(self.root / self.records[iid]["path"])
        return img

    def annotations(self, iid: str) -> list[tuple[BBox, float]]:
        return [(BBox(a["x"], a["y"], a["w"], a["h"]), float(a["angle_deg"]))
                for a in self.records[iid]["annotations"]]

    def ids(self, split: str | None = None) -> list[str]:
        return sorted(self.records) if split is None else list(self.splits[split])

    def fingerprint(self) -> str:
        return hashlib.sha256((self.root / "manifest.jsonl").read_bytes()).hexdigest()[:16]


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise DataError(f"no manifest at {manifest}; run the synth command first")
    lines = manifest.read_text().splitlines()
    header = json.loads(lines[0]).get("header")
    if not header or header.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{manifest}: missing manifest header")
    records = {}
    for line in lines[1:]:
        if line.strip():
            rec = json.loads(line)
            records[rec["image_id"]] = rec
    splits = json.loads((root / "splits.json").read_text())
    return Dataset(root, records, splits, header)


def glyph_patch_size(size: float) -> int:
    """Odd side of a square crop that holds the glyph at any angle."""
    return 2 * int(math.ceil(0.75 * size)) + 1
