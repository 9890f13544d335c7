import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from derotnet import nn
from derotnet.derotation import (
    derotate, derotate_backward, derotate_forward, derotation_record, normalize_pose, normalize_pose_batch,
    pose_from_degrees, pose_jacobian, rotation_loss, rotation_loss_backward, rotation_loss_op, wrap_degrees,
)
from derotnet.errors import NormalizationDegenerate, ShapeError
from derotnet.nn import Tensor, grad_check

angles = st.floats(-180, 180, allow_nan=False)


def unit(deg):
    return (math.cos(math.radians(deg)), math.sin(math.radians(deg)))


def brute_force_derotate(fmap, cos, sin):
    """Per-pixel inverse mapping with uniform averaging of the in-bounds
    nearest neighbours, written directly from the geometry."""
    h, w = fmap.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    out = np.zeros_like(fmap)
    for r in range(h):
        for c in range(w):
            u, v = c - cx, r - cy
            x, y = cx + cos * u + sin * v, cy - sin * u + cos * v
            if abs(x - round(x)) < 1e-9 and abs(y - round(y)) < 1e-9:
                xi, yi = int(round(x)), int(round(y))
                out[r, c] = fmap[yi, xi] if 0 <= xi < w and 0 <= yi < h else 0.0
                continue
            xs = [math.floor(x), math.floor(x) + 1] if abs(x - round(x)) >= 1e-9 else [int(round(x))] * 2
            ys = [math.floor(y), math.floor(y) + 1] if abs(y - round(y)) >= 1e-9 else [int(round(y))] * 2
            total = 0.0
            for yy in ys:
                for xx in xs:
                    if 0 <= xx < w and 0 <= yy < h:
                        total += fmap[yy, xx]
            out[r, c] = total / 4
    return out


# ---------------------------------------------------------------- normalize_pose

def test_normalize_pose_examples():
    assert normalize_pose(3, 4).l == (0.6, 0.8)
    assert normalize_pose(1, 0).l == (1.0, 0.0)
    assert normalize_pose(-1e-30, 0).l == (-1.0, 0.0)


def test_normalize_pose_degenerate():
    with pytest.raises(NormalizationDegenerate):
        normalize_pose(0.0, 0.0)


@given(st.floats(-1e30, 1e30, allow_nan=False), st.floats(-1e30, 1e30, allow_nan=False),
       st.sampled_from([1e-30, 1.0, 1e30]))
def test_unit_circle_invariant(c, s, k):
    if c == 0 and s == 0:
        return
    for cc, ss in ((c, s), (c * k, s * k)):
        if (cc == 0 and ss == 0) or not (math.isfinite(cc) and math.isfinite(ss)):
            continue
        l = normalize_pose(cc, ss)
        assert abs(l.cos ** 2 + l.sin ** 2 - 1) < 1e-12


def test_batch_normalization_marks_degenerate_rows():
    poses, bad = normalize_pose_batch(np.array([[0.0, 0.0], [0.0, 2.0]]))
    np.testing.assert_array_equal(bad, [True, False])
    np.testing.assert_array_equal(poses, [[1, 0], [0, 1]])


def test_pose_from_degrees_quadrants_exact():
    assert [pose_from_degrees(a).l for a in (0, 90, 180, 270, -90)] == \
        [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0), (0.0, -1.0)]
    np.testing.assert_allclose(wrap_degrees([180, 190, -190]), [-180, -170, 170])


# ---------------------------------------------------------------- forward

def test_identity_is_bit_exact():
    f = np.random.default_rng(0).normal(size=(3, 7, 6))
    out, rec = derotate_forward(f, (1.0, 0.0))
    assert out.tobytes() == f.tobytes()
    assert rec.exact.all()


def test_half_turn_is_axis_flip():
    f = np.arange(16.0).reshape(1, 4, 4)
    out, _ = derotate_forward(f, (-1.0, 0.0))
    np.testing.assert_array_equal(out, f[:, ::-1, ::-1])


def test_quarter_turn_one_hot_lands_where_geometry_says():
    f = np.zeros((1, 5, 5))
    f[0, 1, 2] = 1.0
    out, _ = derotate_forward(f, (0.0, 1.0))
    # source (x, y) = (2, 1) is (0, -1) from the centre; the output point p'
    # with R^T p' = (0, -1) is (1, 0), i.e. row 2, column 3
    hot = np.argwhere(out[0] == 1.0)
    np.testing.assert_array_equal(hot, [[2, 3]])
    np.testing.assert_array_equal(out[0], brute_force_derotate(f[0], 0.0, 1.0))


@pytest.mark.parametrize("deg,k", [(90, -1), (180, 2), (270, 1)])
@pytest.mark.parametrize("n", [3, 5, 9])
def test_right_angles_are_permutations(deg, k, n):
    f = np.random.default_rng(n).normal(size=(2, n, n))
    out, rec = derotate_forward(f, pose_from_degrees(deg))
    assert rec.exact.all()
    np.testing.assert_array_equal(out, np.rot90(f, k, axes=(1, 2)))


@given(angles, st.integers(3, 8), st.integers(3, 8), st.integers(0, 2**31))
def test_forward_matches_brute_force(deg, h, w, seed):
    f = np.random.default_rng(seed).normal(size=(h, w))
    out, _ = derotate_forward(f[None], unit(deg))
    np.testing.assert_allclose(out[0], brute_force_derotate(f, *unit(deg)), rtol=0, atol=1e-12)


@given(angles, st.integers(3, 9))
def test_record_weights(deg, n):
    rec = derotation_record(n, n + 1, unit(deg))
    inb = rec.index >= 0
    assert np.all(rec.weight[~inb] == 0)
    assert np.all(rec.weight[rec.exact] == [1, 0, 0, 0])
    assert np.all(rec.weight[~rec.exact][inb[~rec.exact]] == 0.25)


def test_zero_padding_on_constant_map():
    out, rec = derotate_forward(np.ones((1, 9, 9)), unit(30))
    full = (rec.index >= 0).all(axis=1).reshape(9, 9)
    assert np.all(out[0][full] == 1.0)
    for r, c in ((0, 0), (0, 8), (8, 0), (8, 8)):
        assert out[0, r, c] < 1.0


@given(angles, st.integers(0, 2**31))
def test_linearity(deg, seed):
    rng = np.random.default_rng(seed)
    # dyadic values keep every sum exact, so equality is exact
    f1, f2 = rng.integers(-64, 64, (2, 6, 7)) / 8.0, rng.integers(-64, 64, (2, 6, 7)) / 8.0
    a, b = 3.0, -0.5
    lhs, _ = derotate_forward(a * f1 + b * f2, unit(deg))
    o1, _ = derotate_forward(f1, unit(deg))
    o2, _ = derotate_forward(f2, unit(deg))
    np.testing.assert_array_equal(lhs, a * o1 + b * o2)
    g1, g2 = rng.normal(size=(2, 2, 6, 7))
    lhs, _ = derotate_forward(a * g1 + b * g2, unit(deg))
    np.testing.assert_allclose(lhs, a * derotate_forward(g1, unit(deg))[0] + b * derotate_forward(g2, unit(deg))[0],
                               atol=1e-12)


@given(angles, st.integers(0, 2**31))
def test_adjointness(deg, seed):
    rng = np.random.default_rng(seed)
    f, g = rng.normal(size=(2, 3, 7, 6))
    out, rec = derotate_forward(f, unit(deg))
    back = derotate_backward(g, rec)
    assert abs(np.vdot(out, g) - np.vdot(f, back)) < 1e-10


def test_round_trip_exact_for_identity_and_right_angles():
    f = np.random.default_rng(3).normal(size=(1, 7, 7))
    for deg in (0, 90, 180, 270):
        l = pose_from_degrees(deg)
        once, _ = derotate_forward(f, l)
        back, _ = derotate_forward(once, l.conjugate())
        np.testing.assert_array_equal(back, f)


@given(st.floats(1, 359), st.floats(-1, 1), st.floats(-1, 1))
def test_round_trip_interior_cells(deg, a, b):
    n = 11
    rows, cols = np.mgrid[0:n, 0:n].astype(float)
    f = (a * cols + b * rows)[None]
    l = unit(deg)
    once, r1 = derotate_forward(f, l)
    back, r2 = derotate_forward(once, (l[0], -l[1]))
    full1 = (r1.index >= 0).all(axis=1) | r1.exact
    full2 = (r2.index >= 0).all(axis=1) | r2.exact
    interior = [p for p in range(n * n)
                if full2[p] and all(full1[q] for q in r2.index[p] if q >= 0)]
    assert interior
    # each 4-NN average moves a sample by at most one cell per axis
    bound = 2 * (abs(a) + abs(b)) * math.sqrt(2) + 1e-12
    err = np.abs(back.reshape(-1) - f.reshape(-1))[interior]
    assert err.max() <= bound


# ---------------------------------------------------------------- backward

def test_backward_identity_and_half_turn():
    g = np.random.default_rng(4).normal(size=(2, 4, 4))
    _, rec = derotate_forward(np.zeros((2, 4, 4)), (1.0, 0.0))
    np.testing.assert_array_equal(derotate_backward(g, rec), g)
    _, rec = derotate_forward(np.zeros((2, 4, 4)), (-1.0, 0.0))
    np.testing.assert_array_equal(derotate_backward(g, rec), g[:, ::-1, ::-1])


@given(angles, st.integers(0, 2**31))
def test_derotate_fd(deg, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 2, 5, 6)))
    poses = np.array([unit(deg), unit(-deg / 2)])
    # a positive probe cannot cancel inside a gradient entry, so relative error stays meaningful
    probe = rng.uniform(0.5, 1.5, x.shape)
    assert grad_check(lambda: nn.weighted_sum(derotate(x, poses), probe), x) < 1e-6


def test_no_angle_gradient_in_uniform_mode():
    x = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
    raw = Tensor(np.array([[0.7, 0.2]]), requires_grad=True)
    with pytest.raises(ValueError):
        derotate(x, np.array([[0.96, 0.27]]), raw_pose=raw)


def test_backward_shape_mismatch():
    _, rec = derotate_forward(np.zeros((1, 4, 4)), unit(10))
    with pytest.raises(ShapeError):
        derotate_backward(np.zeros((1, 5, 4)), rec)


# ---------------------------------------------------------------- rotation loss

def test_rotation_loss_examples():
    assert rotation_loss((1, 0), (1, 0)) == 0
    assert rotation_loss((1, 0), (0, 1)) == 2.0
    assert rotation_loss((1, 0), (-1, 0)) == 4.0


@given(angles, angles)
def test_law_of_cosines(a, b):
    assert abs(rotation_loss(unit(a), unit(b)) - (2 - 2 * math.cos(math.radians(a - b)))) < 1e-10


def test_jacobian_at_identity():
    np.testing.assert_array_equal(pose_jacobian(1.0, 0.0), [[0, 0], [0, 1]])
    assert rotation_loss_backward(1.0, 0.0, (1.0, 0.0)) == (0.0, 0.0)


def test_jacobian_matches_listed_formulas_symbolically():
    sympy = pytest.importorskip("sympy")
    c, s = sympy.symbols("c s", real=True, positive=True)
    r = c ** 2 + s ** 2
    listed = sympy.Matrix([[r ** sympy.Rational(-1, 2) - c ** 2 * r ** sympy.Rational(-3, 2), -c * s * r ** sympy.Rational(-3, 2)],
                           [-c * s * r ** sympy.Rational(-3, 2), r ** sympy.Rational(-1, 2) - s ** 2 * r ** sympy.Rational(-3, 2)]])
    derived = sympy.Matrix([c / sympy.sqrt(r), s / sympy.sqrt(r)]).jacobian([c, s])
    assert sympy.simplify(listed - derived) == sympy.zeros(2, 2)
    f = sympy.lambdify((c, s), listed, "numpy")
    rng = np.random.default_rng(5)
    for cc, ss in rng.uniform(-3, 3, (20, 2)):
        np.testing.assert_allclose(pose_jacobian(cc, ss), np.array(f(cc, ss), float), rtol=0, atol=1e-10)


@given(st.floats(-5, 5), st.floats(-5, 5), angles)
def test_rotation_loss_backward_fd(c, s, deg):
    if math.hypot(c, s) < 1e-2:
        return
    target = unit(deg)
    g = np.array(rotation_loss_backward(c, s, target))
    eps = 1e-6
    num = np.array([
        (rotation_loss(normalize_pose(c + eps, s).l, target) - rotation_loss(normalize_pose(c - eps, s).l, target)) / (2 * eps),
        (rotation_loss(normalize_pose(c, s + eps).l, target) - rotation_loss(normalize_pose(c, s - eps).l, target)) / (2 * eps),
    ])
    assert np.all(np.abs(g - num) <= 1e-6 * np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-3))


def test_rotation_loss_op_masks_negatives_and_degenerates():
    raw = Tensor(np.array([[1.0, 1.0], [0.0, 0.0], [2.0, -1.0]]), requires_grad=True)
    targets = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    loss = rotation_loss_op(raw, targets, np.array([True, True, False]))
    assert float(loss.values) == pytest.approx(rotation_loss(normalize_pose(1, 1), (1, 0)))
    loss.backward()
    assert np.all(raw.grad[1:] == 0) and np.any(raw.grad[0] != 0)
    assert grad_check(lambda: rotation_loss_op(raw, targets, np.array([True, False, True])), raw) < 1e-7
