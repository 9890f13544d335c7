import json
import os
import subprocess
import sys

import pytest

from derotnet import cli
from derotnet.config import RunConfig

TINY = """
seed = 0
[data]
n_images = 15
image_size = 64
glyph_size = [14.0, 20.0]
distractor_count = [1, 2]
[network]
patch_size = 24
shared_channels = [4, 6, 8]
branch_conv_channels = [4, 4]
branch_fc = [8, 8]
[training]
epochs = [1, 1, 1]
batch_size = 8
batches_per_epoch = 2
pos_per_image = 4
neg_per_image = 8
[proposals]
n_clusters = 2
min_size = 12.0
max_size = 32.0
svm_iterations = 200
neg_per_image = 60
mining_cap = 200
[mining]
epochs = [1, 1]
"""


def _run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.toml"
    cfg_path.write_text(TINY)
    doc = RunConfig.load(cfg_path)
    doc.data.root = str(root / "data")
    doc.save(cfg_path)
    run = root / "run"
    assert _run("synth", "--config", cfg_path) == 0
    for step in (["train", "--mode", "rotation"], ["calibrate"], ["propose"],
                 ["train", "--mode", "separated"], ["train", "--mode", "joint"],
                 ["train", "--mode", "gt-rotation"], ["mine"], ["eval"]):
        assert _run(*step, "--config", cfg_path, "--out", run) == 0, step
    return cfg_path, run


def test_pipeline_artifacts(tiny_run):
    _, run = tiny_run
    for name in ("rotation.ckpt", "separated.ckpt", "joint.ckpt", "gt-rotation.ckpt", "mined.ckpt",
                 "proposals.jsonl", "proposal_model.json", "config.toml", "eval/metrics.json",
                 "eval/pr.svg", "eval/summary.csv"):
        assert (run / name).exists(), name
    metrics = json.loads((run / "eval/metrics.json").read_text())
    assert [m["model"] for m in metrics["models"]] == ["separated", "joint", "gt-rotation", "mined"]
    assert (run / "eval/pr.svg").read_text().lstrip().startswith("<?xml")


def test_joint_log_has_three_stage_blocks(tiny_run):
    _, run = tiny_run
    stages = [json.loads(line)["stage"] for line in (run / "logs/joint.jsonl").read_text().splitlines()]
    blocks = [s for i, s in enumerate(stages) if i == 0 or stages[i - 1] != s]
    assert blocks == ["rotation_only", "detection_frozen", "joint"]
    mined = [json.loads(line)["stage"] for line in (run / "logs/mined.jsonl").read_text().splitlines()]
    assert mined[:len(stages)] == stages and any(s.startswith("mining1_") for s in mined)


def test_provenance_mismatch_needs_force(tiny_run, tmp_path, capsys):
    cfg_path, run = tiny_run
    other = RunConfig.load(cfg_path)
    other.eval.nms_threshold = 0.25
    other.save(tmp_path / "other.toml")
    assert _run("eval", "--config", tmp_path / "other.toml", "--out", run) == 2
    assert "--force" in capsys.readouterr().err
    assert _run("eval", "--config", tmp_path / "other.toml", "--out", run, "--force", "--mode", "joint") == 0
    # the original config again
    assert _run("eval", "--config", cfg_path, "--out", run) == 0


def test_missing_checkpoint_is_a_data_error(tiny_run, tmp_path, capsys):
    cfg_path, _ = tiny_run
    assert _run("calibrate", "--config", cfg_path, "--out", tmp_path / "empty") == 2
    assert "rotation" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert _run("frobnicate") == 1
    assert _run("train") == 1
    assert _run("train", "--mode", "bogus") == 1
    assert _run("eval", "--seed", "x") == 1
    (tmp_path / "bad.toml").write_text("nonsense_key = 1\n")
    assert _run("gradcheck", "--config", tmp_path / "bad.toml") == 1
    assert _run("gradcheck", "--config", tmp_path / "missing.toml") == 1
    assert _run("--help") == 0


def test_missing_dataset_is_a_data_error(tmp_path):
    cfg = RunConfig()
    cfg.data.root = str(tmp_path / "nowhere")
    cfg.save(tmp_path / "c.toml")
    assert _run("train", "--mode", "rotation", "--config", tmp_path / "c.toml", "--out", tmp_path / "r") == 2


def test_gradcheck_command(capsys):
    assert _run("gradcheck") == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split("\t") == ["op", "wrt", "max_rel_error", "status"]
    assert all(line.endswith("ok") for line in out[1:])


def test_thread_cap_environment(monkeypatch):
    monkeypatch.setenv("DEROTNET_THREADS", "2")
    for var in cli.THREAD_VARS:
        monkeypatch.delenv(var, raising=False)
    cli._limit_threads()
    assert all(os.environ[v] == "2" for v in cli.THREAD_VARS)
    monkeypatch.setenv("DEROTNET_THREADS", "zero")
    assert _run("gradcheck") == 1


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "derotnet.cli", "nope"], capture_output=True, text=True,
                       env={**os.environ, "DEROTNET_THREADS": "1"})
    assert r.returncode == 1 and "invalid choice" in r.stderr
