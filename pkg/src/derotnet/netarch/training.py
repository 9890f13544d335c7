"""Staged optimization, hard negative mining and the training log."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from derotnet import nn
from derotnet.derotation import rotation_loss_op
from derotnet.errors import NumericalError
from derotnet.netarch.model import GROUPS, RotationAwareNet, frozen
from derotnet.netarch.samples import (
    N_ROTATIONS, BalancedSampler, PatchSource, SamplePool, TrainingSample, augment,
)
from derotnet.nn import Sgd, SgdConfig

log = logging.getLogger(__name__)


class Stage(str, Enum):
    ROTATION_ONLY = "rotation_only"
    DETECTION_FROZEN = "detection_frozen"
    JOINT = "joint"


STAGE_GROUPS = {
    Stage.ROTATION_ONLY: ("shared", "rotation"),
    Stage.DETECTION_FROZEN: ("detection",),
    Stage.JOINT: GROUPS,
}


@dataclass(frozen=True)
class StageSpec:
    stage: Stage
    epochs: int
    lr: float
    trainable: tuple[str, ...]
    average_tail: bool = False      # finish on the mean iterate of the low-lr tail


@dataclass
class StagePlan:
    stages: list[StageSpec]
    batch_size: int = 32
    batches_per_epoch: int = 25
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float | None = 10.0
    decay_at: float = 0.75          # fraction of a stage after which lr drops 10x

    def __post_init__(self):
        for spec in self.stages:
            if tuple(sorted(spec.trainable)) != tuple(sorted(STAGE_GROUPS[spec.stage])):
                raise ValueError(f"stage {spec.stage.value} must train exactly {STAGE_GROUPS[spec.stage]}")

    @classmethod
    def default(cls, epochs=(20, 20, 30), lrs=(1e-2, 1e-2, 1e-3), average=(False, True, True),
                **kw) -> "StagePlan":
        specs = [StageSpec(s, e, lr, STAGE_GROUPS[s], a) for s, e, lr, a in zip(Stage, epochs, lrs, average)]
        return cls(specs, **kw)

    def spec(self, stage: Stage) -> StageSpec:
        for s in self.stages:
            if s.stage == stage:
                return s
        raise KeyError(stage)


@dataclass
class LogRecord:
    stage: str
    epoch: int
    rotation_loss: float | None
    detection_loss: float | None
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(vars(self), sort_keys=True)


class AugmentedPositives(Sequence):
    """The 72 flip/rotation variants of each base positive, built on access."""

    per_sample = 2 * N_ROTATIONS

    def __init__(self, base: list[TrainingSample]):
        self.base = list(base)
        self._cache: dict[int, list[TrainingSample]] = {}

    def __len__(self):
        return len(self.base) * self.per_sample

    def __getitem__(self, i):
        b, j = divmod(int(i), self.per_sample)
        variants = self._cache.get(b)
        if variants is None:
            variants = augment(self.base[b])
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[b] = variants
        return variants[j]


def _targets(samples) -> tuple[np.ndarray, np.ndarray]:
    pos = np.array([s.is_positive for s in samples])
    poses = np.array([s.pose if s.is_positive else (1.0, 0.0) for s in samples], dtype=np.float64)
    return pos, poses


def _labels(samples) -> np.ndarray:
    y = np.zeros((len(samples), 2))
    y[np.arange(len(samples)), [s.label for s in samples]] = 1.0
    return y


def run_stage(plan: StagePlan, stage: Stage, pool: SamplePool, model: RotationAwareNet,
              source: PatchSource, seed: int = 0, gt_rotation: bool = False,
              epochs: int | None = None, sink: Callable[[LogRecord], None] | None = None,
              stage_tag: str | None = None, lr: float | None = None) -> list[LogRecord]:
    """Train one stage in place. Parameters outside the stage's groups are
    never touched. ``gt_rotation`` feeds positives' ground-truth poses to the
    derotation layer instead of the predicted ones. ``epochs`` and ``lr``
    override the plan's values for this call."""
    spec = plan.spec(stage)
    base_lr = spec.lr if lr is None else lr
    n_epochs = spec.epochs if epochs is None else epochs
    rng = np.random.default_rng([seed, list(Stage).index(stage), 0x57A6E])
    sampler = BalancedSampler(pool, plan.batch_size, rng, positives_only=stage is Stage.ROTATION_ONLY)
    params = model.params
    names = [n for g in spec.trainable for n in params.group(g)]
    opt = Sgd(params, SgdConfig(base_lr, plan.momentum, plan.weight_decay, seed, plan.clip_norm))
    decay_epoch = int(np.ceil(plan.decay_at * n_epochs)) if plan.decay_at < 1 else n_epochs
    records = []
    tail_sum: dict[str, np.ndarray] = {}
    tail_n = 0
    saved = {k: t.requires_grad for k, t in params.items()}
    params.set_trainable(spec.trainable)
    try:
        for epoch in range(n_epochs):
            t0 = time.perf_counter()
            opt.lr = base_lr * (0.1 if epoch >= decay_epoch else 1.0)
            rot_sum, det_sum = 0.0, 0.0
            for b in range(plan.batches_per_epoch):
                samples = sampler.next()
                x = source.batch(samples)
                is_pos, poses = _targets(samples)
                params.zero_grad()
                if stage is Stage.ROTATION_ONLY:
                    out = model.forward_rotation(x)
                    rloss = rotation_loss_op(out.raw_pose, poses, is_pos)
                    loss, dloss = rloss, None
                else:
                    override = poses if gt_rotation else None
                    out = model.forward_joint(x, override, is_pos if gt_rotation else None)
                    dloss = nn.softmax_cross_entropy(out.logits, _labels(samples))
                    if stage is Stage.JOINT:
                        rloss = rotation_loss_op(out.raw_pose, poses, is_pos)
                        loss = nn.add(rloss, dloss)
                    else:
                        rloss, loss = None, dloss
                value = float(loss.values)
                if not np.isfinite(value):
                    raise NumericalError(
                        f"non-finite loss in stage {stage.value}, epoch {epoch}, batch {b}: "
                        f"rotation={None if rloss is None else float(rloss.values)}, "
                        f"detection={None if dloss is None else float(dloss.values)}")
                loss.backward()
                opt.step(names)
                if spec.average_tail and epoch >= decay_epoch:
                    for n in names:
                        v = params[n].values
                        if n in tail_sum:
                            tail_sum[n] += v
                        else:
                            tail_sum[n] = v.copy()
                    tail_n += 1
                rot_sum += 0.0 if rloss is None else float(rloss.values)
                det_sum += 0.0 if dloss is None else float(dloss.values)
            nb = plan.batches_per_epoch
            rec = LogRecord(stage_tag or stage.value, epoch,
                            rot_sum / nb if stage is not Stage.DETECTION_FROZEN else None,
                            det_sum / nb if stage is not Stage.ROTATION_ONLY else None,
                            round((time.perf_counter() - t0) * 1000.0, 1))
            records.append(rec)
            if sink:
                sink(rec)
            log.info("%s epoch %d rot=%s det=%s", rec.stage, epoch, rec.rotation_loss, rec.detection_loss)
        if tail_n:
            for n, total in tail_sum.items():
                params[n].values = total / tail_n
    finally:
        for k, t in params.items():
            t.requires_grad = saved[k]
        params.zero_grad()
    return records


def score_samples(model: RotationAwareNet, source: PatchSource, samples, batch_size: int = 64,
                  gt_rotation: bool = False) -> np.ndarray:
    probs = []
    with frozen(model.params):
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            x = source.batch(chunk)
            if gt_rotation:
                is_pos, poses = _targets(chunk)
                p, _ = model.predict(x, batch_size, poses, is_pos)
            else:
                p, _ = model.predict(x, batch_size)
            probs.append(p)
    return np.concatenate(probs) if probs else np.zeros(0)


def mine_hard_negatives(model: RotationAwareNet, pool: SamplePool, candidates: list[TrainingSample],
                        source: PatchSource, retrain: Callable[[RotationAwareNet, SamplePool, int], None],
                        threshold: float = 0.5, rounds: int = 2) -> SamplePool:
    """Each round scores every candidate negative, appends those scoring at
    least ``threshold`` (deduplicated by image and box), and retrains."""
    pool = SamplePool(pool.positives, list(pool.negatives))
    seen = {s.key for s in pool.negatives}
    for r in range(rounds):
        scores = score_samples(model, source, candidates)
        hard = []
        for s, p in zip(candidates, scores):
            if p >= threshold and s.key not in seen:
                seen.add(s.key)
                hard.append(s)
        log.info("mining round %d: %d new hard negatives", r + 1, len(hard))
        if not hard:
            break
        pool.negatives.extend(hard)
        retrain(model, pool, r)
    return pool
