"""Run configuration: one TOML document covering every tunable default."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from derotnet.errors import ConfigError


@dataclass
class DataSection:
    root: str = "data"
    n_images: int = 100
    image_size: int = 128
    glyph_count: tuple[int, int] = (1, 3)
    glyph_size: tuple[float, float] = (20.0, 30.0)
    distractor_count: tuple[int, int] = (2, 5)
    noise: float = 0.06
    max_glyph_iou: float = 0.3
    channels: int = 1
    seed: int = 0


@dataclass
class NetworkSection:
    patch_size: int = 48
    shared_channels: tuple[int, int, int] = (8, 16, 32)
    branch_conv_channels: tuple[int, int] = (32, 32)
    branch_fc: tuple[int, int] = (64, 32)
    sampling: str = "uniform"
    angle_gradient: bool = False
    crop_context: float = 1.2


@dataclass
class TrainingSection:
    epochs: tuple[int, int, int] = (60, 32, 24)
    learning_rates: tuple[float, float, float] = (1e-3, 1e-2, 1e-3)
    batch_size: int = 32
    batches_per_epoch: int = 20
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float = 10.0
    decay_at: float = 0.75
    average_tail: tuple[bool, bool, bool] = (False, True, True)
    pos_per_image: int = 24
    neg_per_image: int = 48


@dataclass
class ProposalSection:
    n_clusters: int = 8
    min_size: float = 16.0
    max_size: float = 64.0
    scale_factor: float = math.sqrt(2.0)
    stride_fraction: float = 0.25
    svm_c: float = 1.0
    svm_iterations: int = 1000
    neg_per_image: int = 480
    mining_rounds: int = 1
    mining_cap: int = 1500
    calibration_iou: float = 0.5


@dataclass
class MiningSection:
    threshold: float = 0.5
    rounds: int = 2
    epochs: tuple[int, int] = (4, 4)
    lr_scale: float = 0.1    # retraining continues from the decayed schedule
    max_overlap: float = 0.3  # candidates overlapping a ground truth more than this are not mined


@dataclass
class EvalSection:
    iou: float = 0.5
    nms_threshold: float = 0.3
    fp_recall: float = 0.9
    rotation_deltas: tuple[float, float, float] = (10.0, 20.0, 30.0)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    proposals: ProposalSection = field(default_factory=ProposalSection)
    mining: MiningSection = field(default_factory=MiningSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ------------------------------------------------------------- io

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                doc = tomli.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml())

    def hash(self) -> str:
        """Digest of everything that affects results (the output directory
        does not)."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kw = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        key = where + name
        if dataclasses.is_dataclass(current):
            kw[name] = _build(type(current), value, key + ".")
        else:
            kw[name] = _coerce(value, current, key)
    return cls(**kw)


def _coerce(value, default, key):
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{key} must be a list of {len(default)} values")
        return tuple(_coerce(v, d, key) for v, d in zip(value, default))
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    raise ConfigError(f"{key}: unsupported value {value!r}")
