from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from derotnet.nn.tensor import Tensor


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    clip_norm: float | None = None   # global gradient-norm cap, off by default

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")


class ParamStore(OrderedDict):
    """Named parameter tensors; names are dotted ``group.layer.kind``."""

    def group(self, prefix: str) -> list[str]:
        return [k for k in self if k.split(".", 1)[0] == prefix]

    def set_trainable(self, groups: Iterable[str]) -> None:
        groups = set(groups)
        for name, t in self.items():
            t.requires_grad = name.split(".", 1)[0] in groups

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def count(self) -> int:
        return int(sum(t.values.size for t in self.values()))


class Sgd:
    """Momentum SGD: v <- mu*v - lr*(g + wd*theta); theta <- theta + v.

    With ``clip_norm`` set, gradients are rescaled so their global norm over
    the stepped parameters does not exceed it.
    """

    def __init__(self, params: ParamStore, config: SgdConfig):
        self.params = params
        self.config = config
        self.velocity: dict[str, np.ndarray] = {}
        self.lr = config.lr

    def step(self, names: Iterable[str] | None = None) -> None:
        cfg = self.config
        names = [n for n in (self.params if names is None else names) if self.params[n].grad is not None]
        k = 1.0
        if cfg.clip_norm is not None:
            norm = float(np.sqrt(sum(float(np.sum(self.params[n].grad ** 2)) for n in names)))
            if norm > cfg.clip_norm:
                k = cfg.clip_norm / norm
        for name in names:
            p: Tensor = self.params[name]
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.values)
            v = cfg.momentum * v - self.lr * (k * p.grad + cfg.weight_decay * p.values)
            self.velocity[name] = v
            p.values = p.values + v


def sgd_step(params: ParamStore, config: SgdConfig, velocity: dict | None = None) -> dict:
    """Functional form of one update; returns the new velocity table."""
    opt = Sgd(params, config)
    opt.velocity = dict(velocity or {})
    opt.step()
    return opt.velocity
