import json
import math

import numpy as np
import pytest

from derotnet.derotation import derotate_forward, pose_from_degrees
from derotnet.errors import DataError
from derotnet.synthdata import (
    SceneConfig, canonical_template, generate_dataset, glyph_patch_size, glyph_polygon, load_dataset,
    points_in_polygon, read_pnm, render_glyph, render_scene, write_pnm,
)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    generate_dataset(SceneConfig(seed=3), 20, root)
    return load_dataset(root)


def _draw(angle, seed=1, n=61, size=24.0):
    canvas = np.zeros((n, n))
    c = (n - 1) / 2
    ann = render_glyph(canvas, (c, c), size, angle, np.random.default_rng(seed), intensity=1.0)
    return canvas > 0, ann


def test_upright_glyph_equals_template_exactly():
    mask, _ = _draw(0.0)
    poly = glyph_polygon(24.0, np.random.default_rng(1))
    rows, cols = np.mgrid[0:61, 0:61].astype(float)
    np.testing.assert_array_equal(mask, points_in_polygon(cols - 30, rows - 30, poly))


def test_half_turn_is_point_reflection():
    up, _ = _draw(0.0)
    down, _ = _draw(180.0)
    np.testing.assert_array_equal(down, up[::-1, ::-1])


@pytest.mark.parametrize("angle", [0.0, 33.0, -97.5, 179.0])
def test_box_contains_every_glyph_pixel(angle):
    mask, ann = _draw(angle)
    rows, cols = np.nonzero(mask)
    b = ann.box
    assert cols.min() >= b.x and cols.max() <= b.x2 and rows.min() >= b.y and rows.max() <= b.y2


def test_glyph_is_not_mirror_or_rotation_symmetric():
    up, _ = _draw(0.0)
    assert not np.array_equal(up, up[:, ::-1])
    for k in (1, 2, 3):
        assert not np.array_equal(up, np.rot90(up, k))


def test_same_seed_byte_identical(tmp_path):
    for d in ("a", "b"):
        generate_dataset(SceneConfig(seed=7), 6, tmp_path / d)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_empty_dataset_has_valid_header(tmp_path):
    generate_dataset(SceneConfig(), 0, tmp_path)
    ds = load_dataset(tmp_path)
    assert ds.ids() == [] and ds.header["n_images"] == 0


def test_manifest_schema(small_dataset):
    lines = (small_dataset.root / "manifest.jsonl").read_text().splitlines()
    for line in lines[1:]:
        rec = json.loads(line)
        assert set(rec) == {"image_id", "path", "annotations"}
        for a in rec["annotations"]:
            assert set(a) == {"x", "y", "w", "h", "angle_deg"}


def test_boxes_in_bounds_and_angles_wrapped(small_dataset):
    for iid in small_dataset.ids():
        h, w = small_dataset.image(iid).shape[:2]
        for box, angle in small_dataset.annotations(iid):
            assert box.x >= 0 and box.y >= 0 and box.x2 <= w and box.y2 <= h
            assert -180.0 <= angle < 180.0


def test_splits_are_60_20_20_and_stratified(small_dataset):
    sp = small_dataset.splits
    assert (len(sp["train"]), len(sp["val"]), len(sp["test"])) == (12, 4, 4)
    assert sorted(sp["train"] + sp["val"] + sp["test"]) == small_dataset.ids()
    counts = {i: len(small_dataset.annotations(i)) for i in small_dataset.ids()}
    for k in set(counts.values()):
        total = sum(1 for v in counts.values() if v == k)
        in_train = sum(1 for i in sp["train"] if counts[i] == k)
        assert abs(in_train - 0.6 * total) <= 2


def test_glyph_count_histogram_is_uniform():
    cfg = SceneConfig()
    counts = np.bincount([len(render_scene(cfg, i).annotations) for i in range(100)], minlength=4)[1:]
    expected = 100 / 3
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # survival function of chi-square with 2 degrees of freedom
    assert math.exp(-chi2 / 2) > 0.01


def test_angle_consistency_over_decade_grid():
    cfg = SceneConfig(noise=0.0, distractor_count=(0, 0))
    checked = 0
    for i in range(8):
        scene = render_scene(cfg, i)
        for ann in scene.annotations:
            side = glyph_patch_size(ann.size)
            half = side // 2
            cx, cy = int(ann.center[0]), int(ann.center[1])
            patch = np.pad(scene.image, half)[cy:cy + side, cx:cx + side]
            template = canonical_template(ann.size, side)
            template = template - template.mean()

            def score(a):
                out, _ = derotate_forward(patch[None], pose_from_degrees(a))
                x = out[0] - out[0].mean()
                return float((x * template).sum() / (np.linalg.norm(x) * np.linalg.norm(template) + 1e-12))

            others = [score(ann.angle_deg + 10 * k) for k in range(1, 36)]
            assert score(ann.angle_deg) > max(others)
            checked += 1
    assert checked >= 8


def test_pnm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7)) / 255.0
    write_pnm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.pgm"), img)
    col = np.random.default_rng(1).integers(0, 256, (4, 3, 3)) / 255.0
    write_pnm(tmp_path / "b.ppm", col)
    np.testing.assert_array_equal(read_pnm(tmp_path / "b.ppm"), col)


def test_color_mode_renders_three_channels():
    assert render_scene(SceneConfig(channels=3), 0).image.shape == (128, 128, 3)


def test_unsatisfiable_config_errors():
    with pytest.raises(DataError):
        render_scene(SceneConfig(image_size=48, glyph_count=(6, 6), glyph_size=(40.0, 44.0)), 0)
    with pytest.raises(DataError):
        SceneConfig(glyph_count=(3, 1))


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)
