"""Registered finite-difference gradient checks for every differentiable op."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from derotnet import nn
from derotnet.derotation import derotate, rotation_loss_op
from derotnet.netarch.model import NetworkConfig, RotationAwareNet
from derotnet.nn import Tensor, grad_check

TOLERANCE = 1e-5


@dataclass
class CheckResult:
    op: str
    wrt: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _probe(rng, shape):
    return rng.normal(size=shape)


def _cases(rng) -> list[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    cases = []

    x = Tensor(rng.normal(size=(2, 3, 8, 8)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    b = Tensor(rng.normal(size=4))
    g = _probe(rng, (2, 4, 4, 4))
    cases.append(("conv2d", lambda: nn.weighted_sum(nn.conv2d(x, w, b, 2, 1), g), {"input": x, "weights": w, "bias": b}))

    r = Tensor(_away_from_zero(rng, (3, 7)))
    gr = _probe(rng, (3, 7))
    cases.append(("relu", lambda: nn.weighted_sum(nn.relu(r), gr), {"input": r}))

    m = Tensor(rng.permutation(36).reshape(1, 1, 6, 6).astype(float) + rng.uniform(0, 0.5, (1, 1, 6, 6)))
    gm = _probe(rng, (1, 1, 3, 3))
    cases.append(("maxpool2", lambda: nn.weighted_sum(nn.maxpool2(m), gm), {"input": m}))

    fx = Tensor(rng.normal(size=(4, 5)))
    fw = Tensor(rng.normal(size=(3, 5)))
    fb = Tensor(rng.normal(size=3))
    gf = _probe(rng, (4, 3))
    cases.append(("fully_connected", lambda: nn.weighted_sum(nn.fully_connected(fx, fw, fb), gf),
                  {"input": fx, "weights": fw, "bias": fb}))

    z = Tensor(rng.normal(size=(5, 2)))
    y = np.eye(2)[rng.integers(0, 2, 5)]
    cases.append(("softmax_cross_entropy", lambda: nn.softmax_cross_entropy(z, y), {"logits": z}))

    feat = Tensor(rng.normal(size=(3, 2, 6, 6)))
    ang = rng.uniform(-np.pi, np.pi, 3)
    poses = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    gd = _probe(rng, (3, 2, 6, 6))
    cases.append(("derotation", lambda: nn.weighted_sum(derotate(feat, poses), gd), {"feature": feat}))

    raw = Tensor(rng.normal(size=(6, 2)))
    ta = rng.uniform(-np.pi, np.pi, 6)
    targets = np.stack([np.cos(ta), np.sin(ta)], axis=1)
    mask = np.array([1, 0, 1, 1, 0, 1], bool)
    cases.append(("rotation_loss", lambda: rotation_loss_op(raw, targets, mask), {"raw_pose": raw}))

    net = RotationAwareNet(NetworkConfig(patch_size=24, shared_channels=(2, 3, 4),
                                         branch_conv_channels=(3, 3), branch_fc=(6, 5)), seed=1)
    patches = rng.uniform(0, 1, (3, 1, 24, 24))
    pt = np.stack([np.cos(ta[:3]), np.sin(ta[:3])], axis=1)

    def branch():
        out = net.forward_rotation(patches)
        return rotation_loss_op(out.raw_pose, pt)

    cases.append(("rotation_branch", branch,
                  {k: net.params[k] for k in ("shared.conv1.w", "rotation.conv2.w", "rotation.fc3.w")}))
    return cases


def run_gradient_suite(seed: int = 0, eps: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 0x6C4])
    results = []
    for op, fn, wrt in _cases(rng):
        for name, t in wrt.items():
            t0 = time.perf_counter()
            err = grad_check(fn, t, eps)
            results.append(CheckResult(op, name, err, time.perf_counter() - t0))
    return results
