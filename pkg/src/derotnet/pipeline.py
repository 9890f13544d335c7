"""End-to-end pipeline: data, stage-1 rotation training, proposals, the three
training modes, hard negative mining and evaluation.

Every artifact carries the hash of the resolved run configuration; loading
an artifact from a different configuration fails unless ``force`` is set.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np

from derotnet import eval as ev
from derotnet.config import RunConfig
from derotnet.derotation import pose_from_degrees
from derotnet.errors import DataError, ProvenanceError
from derotnet.geometry import boxes_array
from derotnet.netarch.data import (
    background_candidates, detection_pool, grid_positives, gt_samples, label_proposals, rotation_pool,
)
from derotnet.netarch.model import NetworkConfig, RotationAwareNet
from derotnet.netarch.samples import PatchSource, SamplePool, TrainingSample
from derotnet.netarch.training import (
    AugmentedPositives, Stage, StagePlan, mine_hard_negatives, run_stage,
)
from derotnet.nn import load_checkpoint, save_checkpoint
from derotnet.proposals import (
    AspectClusterModel, WindowConfig, assign_clusters, cluster_aspects, calibrate_thresholds, fit_proposal_model,
    generate_proposals, qualifying_scores, read_proposals, score_windows, write_proposals,
)
from derotnet.synthdata import SceneConfig, generate_dataset, load_dataset

log = logging.getLogger(__name__)

MODES = ("separated", "joint", "gt-rotation")
ROTATION = "rotation"
MINED = "mined"
EVAL_MODELS = ("separated", "joint", "gt-rotation", "mined")


def scene_config(cfg: RunConfig) -> SceneConfig:
    d = cfg.data
    return SceneConfig(image_size=d.image_size, glyph_count=d.glyph_count, glyph_size=d.glyph_size,
                       distractor_count=d.distractor_count, noise=d.noise, max_glyph_iou=d.max_glyph_iou,
                       channels=d.channels, seed=d.seed)


def synthesize(cfg: RunConfig, root=None) -> Path:
    root = Path(root or cfg.data.root)
    generate_dataset(scene_config(cfg), cfg.data.n_images, root)
    return root


def network_config(cfg: RunConfig) -> NetworkConfig:
    n = cfg.network
    return NetworkConfig(patch_size=n.patch_size, in_channels=cfg.data.channels,
                         shared_channels=n.shared_channels, branch_conv_channels=n.branch_conv_channels,
                         branch_fc=n.branch_fc, sampling=n.sampling, angle_gradient=n.angle_gradient,
                         crop_context=n.crop_context)


def stage_plan(cfg: RunConfig) -> StagePlan:
    t = cfg.training
    return StagePlan.default(t.epochs, t.learning_rates, t.average_tail, batch_size=t.batch_size,
                             batches_per_epoch=t.batches_per_epoch, momentum=t.momentum,
                             weight_decay=t.weight_decay, clip_norm=t.clip_norm, decay_at=t.decay_at)


def window_config(cfg: RunConfig) -> WindowConfig:
    p = cfg.proposals
    return WindowConfig(p.min_size, p.max_size, p.scale_factor, p.stride_fraction)


class Pipeline:
    def __init__(self, cfg: RunConfig, out, data_root=None, force: bool = False):
        self.cfg = cfg
        self.out = Path(out)
        self.data_root = Path(data_root or cfg.data.root)
        self.force = force
        self.config_hash = cfg.hash()
        self._dataset = None
        self._proposals = None
        self._pool = None
        self._patch_cache: dict[str, np.ndarray] = {}

    # ------------------------------------------------------------ plumbing

    @property
    def dataset(self):
        if self._dataset is None:
            self._dataset = load_dataset(self.data_root)
        return self._dataset

    @property
    def source(self) -> PatchSource:
        return PatchSource(self.dataset, self.cfg.network.patch_size, self.cfg.network.crop_context)

    def path(self, name: str) -> Path:
        return self.out / name

    def ckpt_path(self, name: str) -> Path:
        return self.out / f"{name}.ckpt"

    def _provenance(self, **extra) -> dict:
        meta = {"config_hash": self.config_hash, "dataset": self.dataset.fingerprint(), "seed": self.cfg.seed}
        meta.update(extra)
        return meta

    def _check(self, meta: dict, what: str) -> None:
        got = meta.get("config_hash")
        if got != self.config_hash and not self.force:
            raise ProvenanceError(f"{what} was produced by config {got}, current config is "
                                  f"{self.config_hash}; rerun it or pass --force")

    def write_config(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg.save(self.out / "config.toml")

    def save_model(self, name: str, net: RotationAwareNet, **meta) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.ckpt_path(name), net.state(), self._provenance(model=name, **meta))

    def load_model(self, name: str) -> RotationAwareNet:
        p = self.ckpt_path(name)
        if not p.exists():
            raise DataError(f"missing checkpoint {p}; run the step that produces '{name}' first")
        tensors, meta = load_checkpoint(p)
        self._check(meta, str(p))
        net = RotationAwareNet(network_config(self.cfg), seed=self.cfg.seed)
        net.load_state(tensors)
        return net

    def _log_writer(self, name: str, inherit: str | None = None):
        logs = self.out / "logs"
        logs.mkdir(parents=True, exist_ok=True)
        prefix = (logs / f"{inherit}.jsonl").read_text() if inherit and (logs / f"{inherit}.jsonl").exists() else ""
        fh = open(logs / f"{name}.jsonl", "w")
        fh.write(prefix)

        def sink(rec):
            fh.write(rec.to_json() + "\n")
            fh.flush()
        return fh, sink

    # ------------------------------------------------------------ stage 1

    def train_rotation(self) -> RotationAwareNet:
        cfg = self.cfg
        net = RotationAwareNet(network_config(cfg), seed=cfg.seed)
        ids = self.dataset.ids("train")
        # positives follow the proposal box distribution: ground truths plus
        # every grid window overlapping one by more than 0.5
        centers = cluster_aspects([b for i in ids for b, _ in self.dataset.annotations(i)],
                                  cfg.proposals.n_clusters, cfg.seed)
        base = gt_samples(self.dataset, ids) + grid_positives(self.dataset, ids, centers, window_config(cfg))
        fh, sink = self._log_writer(ROTATION)
        with fh:
            run_stage(stage_plan(cfg), Stage.ROTATION_ONLY, rotation_pool(base), net, self.source,
                      seed=cfg.seed, sink=sink)
        self.save_model(ROTATION, net, stages=[Stage.ROTATION_ONLY.value])
        return net

    # ----------------------------------------------------------- proposals

    def calibrate(self) -> AspectClusterModel:
        cfg, ds = self.cfg, self.dataset
        net = self.load_model(ROTATION)
        p = cfg.proposals
        model = fit_proposal_model(ds, ds.ids("train"), net, p.n_clusters, window_config(cfg),
                                   cfg.network.crop_context, p.svm_c, p.neg_per_image, cfg.seed,
                                   p.svm_iterations, p.mining_rounds, p.mining_cap)
        best, owners = [], []
        for iid in ds.ids("val"):
            gt = [b for b, _ in ds.annotations(iid)]
            if not gt:
                continue
            boxes, scores, clusters = score_windows(ds.image(iid), net, model)
            best.append(qualifying_scores(boxes_array(gt), boxes, scores, clusters, p.n_clusters,
                                          p.calibration_iou))
            owners.append(assign_clusters(gt, model.centers))
        best = np.concatenate(best) if best else np.zeros((0, p.n_clusters))
        owners = np.concatenate(owners) if owners else np.zeros(0, np.int64)
        model.thresholds = calibrate_thresholds(best, owners)
        self.out.mkdir(parents=True, exist_ok=True)
        model.save(self.path("proposal_model.json"), {"provenance": self._provenance()})
        return model

    def load_proposal_model(self) -> AspectClusterModel:
        p = self.path("proposal_model.json")
        if not p.exists():
            raise DataError(f"missing {p}; run calibrate first")
        self._check(json.loads(p.read_text()).get("provenance", {}), str(p))
        return AspectClusterModel.load(p)

    def propose(self) -> dict:
        ds = self.dataset
        net = self.load_model(ROTATION)
        model = self.load_proposal_model()
        props = []
        for iid in ds.ids():
            props.extend(generate_proposals(ds.image(iid), net, model, iid))
        write_proposals(self.path("proposals.jsonl"), props, self._provenance(n_images=len(ds.ids())))
        self._proposals = None
        return self.proposal_report()

    @property
    def proposals(self) -> dict:
        if self._proposals is None:
            p = self.path("proposals.jsonl")
            if not p.exists():
                raise DataError(f"missing {p}; run propose first")
            props, header = read_proposals(p)
            self._check(header, str(p))
            self._proposals = props
        return self._proposals

    def ground_truths(self, split: str) -> dict:
        return {iid: self.dataset.annotations(iid) for iid in self.dataset.ids(split)}

    def proposal_report(self) -> dict:
        out = {}
        for split in ("train", "val", "test"):
            gts = {k: [b for b, _ in v] for k, v in self.ground_truths(split).items()}
            props = {k: self.proposals.get(k, []) for k in gts}
            out[split] = {"recall": ev.recall_at_iou(props, gts, 0.5), "mabo": ev.mabo(props, gts),
                          "proposals_per_image": sum(len(v) for v in props.values()) / max(1, len(gts))}
        ev.write_metrics_json(self.path("proposal_report.json"), out)
        return out

    # -------------------------------------------------- detection training

    def _detection_data(self):
        if self._pool is None:
            cfg = self.cfg
            rng = np.random.default_rng([cfg.seed, 0xDE7])
            pos, neg, cand = detection_pool(self.dataset, self.dataset.ids("train"), self.proposals, rng,
                                            cfg.training.pos_per_image, cfg.training.neg_per_image)
            if not neg:
                raise DataError("no negative proposals on the training split")
            self._pool = (SamplePool(AugmentedPositives(pos), neg), cand)
        return self._pool

    def train(self, mode: str) -> RotationAwareNet:
        if mode == ROTATION:
            return self.train_rotation()
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {(ROTATION,) + MODES}")
        cfg, plan = self.cfg, stage_plan(self.cfg)
        pool, _ = self._detection_data()
        gt = mode == "gt-rotation"
        if mode == "joint":
            if self.ckpt_path("separated").exists():
                net = self.load_model("separated")
            else:
                net = self.train("separated")
            fh, sink = self._log_writer(mode, inherit="separated")
            with fh:
                run_stage(plan, Stage.JOINT, pool, net, self.source, seed=cfg.seed, sink=sink)
            stages = [s.value for s in Stage]
        else:
            net = self.load_model(ROTATION)
            fh, sink = self._log_writer(mode, inherit=ROTATION)
            with fh:
                run_stage(plan, Stage.DETECTION_FROZEN, pool, net, self.source, seed=cfg.seed,
                          gt_rotation=gt, sink=sink)
                stages = [Stage.ROTATION_ONLY.value, Stage.DETECTION_FROZEN.value]
                if gt:
                    run_stage(plan, Stage.JOINT, pool, net, self.source, seed=cfg.seed,
                              gt_rotation=True, sink=sink)
                    stages.append(Stage.JOINT.value)
        self.save_model(mode, net, stages=stages, gt_rotation=gt)
        return net

    def mine(self) -> RotationAwareNet:
        cfg, plan = self.cfg, stage_plan(self.cfg)
        net = self.load_model("joint")
        pool, candidates = self._detection_data()
        candidates = background_candidates(self.dataset, candidates, cfg.mining.max_overlap)
        fh, sink = self._log_writer(MINED, inherit="joint")
        e2, e3 = cfg.mining.epochs

        def retrain(model, mined_pool, r):
            seed = cfg.seed + 7919 * (r + 1)
            k = cfg.mining.lr_scale
            run_stage(plan, Stage.DETECTION_FROZEN, mined_pool, model, self.source, seed=seed,
                      epochs=e2, sink=sink, stage_tag=f"mining{r + 1}_{Stage.DETECTION_FROZEN.value}",
                      lr=k * plan.spec(Stage.DETECTION_FROZEN).lr)
            run_stage(plan, Stage.JOINT, mined_pool, model, self.source, seed=seed,
                      epochs=e3, sink=sink, stage_tag=f"mining{r + 1}_{Stage.JOINT.value}",
                      lr=k * plan.spec(Stage.JOINT).lr)

        with fh:
            mined = mine_hard_negatives(net, pool, candidates, self.source, retrain,
                                        cfg.mining.threshold, cfg.mining.rounds)
        self.save_model(MINED, net, base="joint", rounds=cfg.mining.rounds,
                        hard_negatives=len(mined.negatives) - len(pool.negatives))
        return net

    # ---------------------------------------------------------- evaluation

    def _split_samples(self, split: str):
        """Proposals of a split as labelled samples, in image order."""
        samples = []
        for iid in self.dataset.ids(split):
            boxes = np.array([p.box.as_tuple() for p in self.proposals.get(iid, [])]).reshape(-1, 4)
            pos, neg = label_proposals(self.dataset, iid, boxes)
            lookup = {s.box.as_tuple(): s for s in pos + neg}
            samples.extend(lookup[tuple(b)] for b in map(tuple, boxes))
        return samples

    def _patches(self, split: str, samples) -> np.ndarray:
        x = self._patch_cache.get(split)
        if x is None:
            x = self.source.batch(samples)
            self._patch_cache[split] = x
        return x

    def detections(self, net: RotationAwareNet, split: str = "test", gt_rotation: bool = False):
        samples = self._split_samples(split)
        if not samples:
            return []
        x = self._patches(split, samples)
        if gt_rotation:
            mask = np.array([s.is_positive for s in samples])
            poses = np.array([s.pose if s.is_positive else (1.0, 0.0) for s in samples])
            probs, out_poses = net.predict(x, 64, poses, mask)
        else:
            probs, out_poses = net.predict(x, 64)
        angles = np.degrees(np.arctan2(out_poses[:, 1], out_poses[:, 0]))
        return [ev.Detection(s.box, float(p), float(a), s.image_id)
                for s, p, a in zip(samples, probs, angles)]

    def evaluate_model(self, name: str, net: RotationAwareNet, split: str = "test") -> tuple[dict, ev.PRCurve]:
        cfg = self.cfg.eval
        gts = self.ground_truths(split)
        gt_boxes = {k: [b for b, _ in v] for k, v in gts.items()}
        raw = self.detections(net, split, gt_rotation=name == "gt-rotation")
        by_image: dict[str, list] = {}
        for d in raw:
            by_image.setdefault(d.image_id, []).append(d)
        kept = [d for iid in sorted(by_image) for d in ev.nms(by_image[iid], cfg.nms_threshold)]
        curve = ev.average_precision(kept, gt_boxes, cfg.iou)
        row = {"model": name, "ap": curve.ap, "n_detections": len(kept),
               "fp_at_recall": ev.false_positives_at_recall(curve, cfg.fp_recall),
               "max_recall": float(curve.recall[-1]) if len(curve.recall) else 0.0}
        for label, pairs in (("matched", ev.matched_angle_pairs(kept, gts, cfg.iou)),
                             ("proposals", ev.proposal_angle_pairs(raw, gts, cfg.iou))):
            if len(pairs[0]):
                acc = ev.rotation_accuracy(*pairs, cfg.rotation_deltas)
                row[f"rotation_{label}"] = {f"{int(k)}": v for k, v in acc.items()}
                row[f"rotation_{label}_n"] = int(len(pairs[0]))
        return row, curve

    def evaluate(self, models=None, split: str = "test") -> dict:
        names = [m for m in (models or EVAL_MODELS) if models or self.ckpt_path(m).exists()]
        if not names:
            raise DataError(f"no trained checkpoints in {self.out}")
        eval_dir = self.out / "eval"
        eval_dir.mkdir(parents=True, exist_ok=True)
        rows, curves = [], {}
        for name in names:
            net = self.load_model(name)
            row, curve = self.evaluate_model(name, net, split)
            rows.append(row)
            curves[name] = curve
            ev.write_pr_csv(eval_dir / f"pr_{name}.csv", curve)
        if ROTATION not in names and self.ckpt_path(ROTATION).exists():
            gts = self.ground_truths(split)
            pairs = ev.proposal_angle_pairs(self.detections(self.load_model(ROTATION), split), gts,
                                            self.cfg.eval.iou)
            if len(pairs[0]):
                acc = ev.rotation_accuracy(*pairs, self.cfg.eval.rotation_deltas)
                rotation_only = {f"{int(k)}": v for k, v in acc.items()}
            else:
                rotation_only = None
        else:
            rotation_only = None
        gt_boxes = {k: [b for b, _ in v] for k, v in self.ground_truths(split).items()}
        props = {k: self.proposals.get(k, []) for k in gt_boxes}
        metrics = {
            "config_hash": self.config_hash, "seed": self.cfg.seed, "split": split,
            "models": rows,
            "rotation_only": rotation_only,
            "proposals": {"recall": ev.recall_at_iou(props, gt_boxes, 0.5), "mabo": ev.mabo(props, gt_boxes),
                          "per_image": sum(len(v) for v in props.values()) / max(1, len(props))},
        }
        ev.write_metrics_json(eval_dir / "metrics.json", metrics)
        ev.plot_pr_curves(eval_dir / "pr.svg", curves, title=f"{split} split, seed {self.cfg.seed}")
        _write_summary(eval_dir / "summary.csv", rows)
        return metrics

    # ---------------------------------------------------------------- all

    def run_all(self, evaluate: bool = True) -> dict | None:
        self.write_config()
        self.train_rotation()
        self.calibrate()
        self.propose()
        for mode in ("separated", "joint", "gt-rotation"):
            self.train(mode)
        self.mine()
        return self.evaluate() if evaluate else None


def _write_summary(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "ap", "fp_at_recall", "rot10", "rot20", "rot30", "n_detections"])
        for r in rows:
            rot = r.get("rotation_proposals", {})
            fp = r["fp_at_recall"]
            w.writerow([r["model"], f"{r['ap']:.6f}", "inf" if math.isinf(fp) else int(fp),
                        *(f"{rot.get(k, float('nan')):.6f}" for k in ("10", "20", "30")), r["n_detections"]])
