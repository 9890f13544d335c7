"""The rotation-aware network: shared stack, rotation branch, derotation
layer, detection branch."""
from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from derotnet import nn
from derotnet.derotation import derotate, normalize_pose_batch
from derotnet.errors import ShapeError
from derotnet.nn import ParamStore, Tensor
from derotnet.nn.tensor import make_node

GROUPS = ("shared", "rotation", "detection")


@contextmanager
def frozen(params: ParamStore):
    """Temporarily stop gradient tracking on every parameter."""
    saved = {k: t.requires_grad for k, t in params.items()}
    params.set_trainable(())
    try:
        yield
    finally:
        for k, t in params.items():
            t.requires_grad = saved[k]


@dataclass(frozen=True)
class NetworkConfig:
    patch_size: int = 48
    in_channels: int = 1
    shared_channels: tuple[int, ...] = (8, 16, 32)
    branch_conv_channels: tuple[int, ...] = (32, 32)
    branch_fc: tuple[int, ...] = (64, 32)
    kernel: int = 3
    sampling: str = "uniform"
    angle_gradient: bool = False
    crop_context: float = 1.2
    input_mean: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "shared_channels", tuple(self.shared_channels))
        object.__setattr__(self, "branch_conv_channels", tuple(self.branch_conv_channels))
        object.__setattr__(self, "branch_fc", tuple(self.branch_fc))
        if len(self.shared_channels) != 3:
            raise ShapeError("the shared stack has exactly three conv blocks")
        if len(self.branch_conv_channels) != 2 or len(self.branch_fc) != 2:
            raise ShapeError("each branch has 2 conv layers and 3 fully connected layers")
        if self.feature_size < 3:
            raise ShapeError(f"shared feature map {self.feature_size}x{self.feature_size} is below 3x3; "
                             "raise patch_size")
        if self.angle_gradient and self.sampling != "bilinear":
            raise ValueError("angle_gradient needs bilinear sampling")

    @property
    def feature_size(self) -> int:
        s = self.patch_size
        for _ in self.shared_channels:
            s = (s + 1) // 2
        return s


@dataclass
class JointOutput:
    features: Tensor
    raw_pose: Tensor
    poses: np.ndarray
    degenerate: np.ndarray
    logits: Tensor | None = None
    derotated: Tensor | None = None


class RotationAwareNet:
    def __init__(self, config: NetworkConfig = NetworkConfig(), seed: int = 0,
                 params: ParamStore | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed: int) -> ParamStore:
        cfg = self.config
        rng = np.random.default_rng([seed, 0xD3207])
        p = ParamStore()
        k = cfg.kernel

        def conv(name, cin, cout):
            p[f"{name}.w"] = Tensor(nn.he_normal(rng, (cout, cin, k, k), cin * k * k), name=f"{name}.w")
            p[f"{name}.b"] = Tensor(np.zeros(cout), name=f"{name}.b")

        def fc(name, din, dout):
            p[f"{name}.w"] = Tensor(nn.he_normal(rng, (dout, din), din), name=f"{name}.w")
            p[f"{name}.b"] = Tensor(np.zeros(dout), name=f"{name}.b")

        cin = cfg.in_channels
        for i, c in enumerate(cfg.shared_channels, 1):
            conv(f"shared.conv{i}", cin, c)
            cin = c
        flat = cfg.branch_conv_channels[-1] * cfg.feature_size ** 2
        for branch in ("rotation", "detection"):
            c = cfg.shared_channels[-1]
            for i, cout in enumerate(cfg.branch_conv_channels, 1):
                conv(f"{branch}.conv{i}", c, cout)
                c = cout
            dims = (flat,) + cfg.branch_fc + (2,)
            for i in range(3):
                fc(f"{branch}.fc{i + 1}", dims[i], dims[i + 1])
        return p

    # ------------------------------------------------------------ pieces

    def shared(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = self.config
        if x.values.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.patch_size, cfg.patch_size):
            raise ShapeError(f"expected (N, {cfg.in_channels}, {cfg.patch_size}, {cfg.patch_size}) patches, "
                             f"got {x.shape}")
        return self.shared_map(x)

    def shared_map(self, x: Tensor) -> Tensor:
        """Shared stack on inputs of any spatial size (used for whole images)."""
        p, pad = self.params, self.config.kernel // 2
        # fixed input centering; the shift has unit gradient
        h = make_node(x.values - self.config.input_mean, (x,), lambda g: (g,), "center")
        for i in range(1, 4):
            h = nn.maxpool2(nn.relu(nn.conv2d(h, p[f"shared.conv{i}.w"], p[f"shared.conv{i}.b"], 1, pad)))
        return h

    def branch(self, name: str, f: Tensor) -> Tensor:
        p, pad = self.params, self.config.kernel // 2
        h = f
        for i in (1, 2):
            h = nn.relu(nn.conv2d(h, p[f"{name}.conv{i}.w"], p[f"{name}.conv{i}.b"], 1, pad))
        h = nn.flatten(h)
        for i in (1, 2, 3):
            h = nn.fully_connected(h, p[f"{name}.fc{i}.w"], p[f"{name}.fc{i}.b"])
            if i < 3:
                h = nn.relu(h)
        return h

    # ----------------------------------------------------------- forward

    def forward_rotation(self, x) -> JointOutput:
        f = self.shared(x)
        cs = self.branch("rotation", f)
        poses, bad = normalize_pose_batch(cs.values)
        return JointOutput(f, cs, poses, bad)

    def forward_joint(self, x, override_pose=None, override_mask=None) -> JointOutput:
        """Full pipeline. ``override_pose`` rows (unit vectors) replace the
        predicted poses wherever ``override_mask`` is true (all rows when the
        mask is omitted)."""
        out = self.forward_rotation(x)
        poses = out.poses.copy()
        if override_pose is not None:
            ov = np.asarray(override_pose, dtype=np.float64).reshape(-1, 2)
            mask = np.ones(len(poses), bool) if override_mask is None else np.asarray(override_mask, bool)
            poses[mask] = ov[mask]
        raw = out.raw_pose if self.config.angle_gradient and override_pose is None else None
        d = derotate(out.features, poses, self.config.sampling, raw_pose=raw)
        out.poses = poses
        out.derotated = d
        out.logits = self.branch("detection", d)
        return out

    def predict(self, x, batch_size: int = 64, override_pose=None, override_mask=None):
        """Detection probabilities and poses without building gradients."""
        with frozen(self.params):
            probs, poses = [], []
            x = np.asarray(x, dtype=np.float64)
            for i in range(0, len(x), batch_size):
                sl = slice(i, i + batch_size)
                op = None if override_pose is None else np.asarray(override_pose)[sl]
                om = None if override_mask is None else np.asarray(override_mask)[sl]
                out = self.forward_joint(x[sl], op, om)
                probs.append(nn.softmax(out.logits.values)[:, 1])
                poses.append(out.poses)
        if not probs:
            return np.zeros(0), np.zeros((0, 2))
        return np.concatenate(probs), np.concatenate(poses)

    def predict_poses(self, x, batch_size: int = 128) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        with frozen(self.params):
            out = [self.forward_rotation(x[i:i + batch_size]).poses for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, 2))

    # ------------------------------------------------------- persistence

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.values for k, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ShapeError(f"checkpoint parameters do not match the network: {sorted(missing)[:4]}")
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} != network shape {self.params[k].shape}")
            self.params[k].values = np.array(v, dtype=np.float64)

    def group_hash(self, group: str) -> str:
        h = hashlib.sha256()
        for name in self.params.group(group):
            h.update(name.encode())
            h.update(self.params[name].values.tobytes())
        return h.hexdigest()

    def clone(self) -> "RotationAwareNet":
        params = ParamStore((k, Tensor(t.values.copy(), name=k)) for k, t in self.params.items())
        return RotationAwareNet(self.config, params=params)
