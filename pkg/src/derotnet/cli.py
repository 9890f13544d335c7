"""Command-line front end: ``derotnet <command> [--config PATH] [--seed N] ...``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")
TRAIN_MODES = ("rotation", "separated", "joint", "gt-rotation")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _limit_threads() -> None:
    # must run before numpy is first imported
    n = os.environ.get("DEROTNET_THREADS")
    if not n:
        return
    if not n.isdigit() or int(n) < 1:
        raise UsageError(f"DEROTNET_THREADS must be a positive integer, got {n!r}")
    for var in THREAD_VARS:
        os.environ[var] = n


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", type=Path, help="output directory (dataset root for synth)")
    common.add_argument("--force", action="store_true", help="accept artifacts from a different config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="derotnet", description="Rotation-aware detector pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    sub.add_parser("calibrate", parents=[common], help="fit proposal SVMs and calibrate thresholds")
    sub.add_parser("propose", parents=[common], help="generate proposals for every image")
    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--mode", choices=TRAIN_MODES, required=True)
    sub.add_parser("mine", parents=[common], help="hard negative mining on the joint model")
    e = sub.add_parser("eval", parents=[common], help="evaluate checkpoints on the test split")
    e.add_argument("--mode", choices=("separated", "joint", "gt-rotation", "mined"), action="append",
                   help="model(s) to evaluate; repeatable (default: every checkpoint present)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    return parser


def _resolve(args):
    from derotnet.config import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _run_dir(args, cfg) -> Path:
    return args.out if args.out else Path(cfg.out) / f"seed_{cfg.seed}"


def _pipeline(args, cfg):
    from derotnet.pipeline import Pipeline

    p = Pipeline(cfg, _run_dir(args, cfg), force=args.force)
    p.write_config()
    return p


def cmd_synth(args, cfg) -> int:
    from derotnet.pipeline import synthesize

    root = synthesize(cfg, args.out)
    print(f"dataset written to {root}")
    return EXIT_OK


def cmd_calibrate(args, cfg) -> int:
    import numpy as np

    model = _pipeline(args, cfg).calibrate()
    print(f"{len(model.centers)} aspect clusters calibrated, thresholds {np.round(model.thresholds, 4).tolist()}")
    return EXIT_OK


def cmd_propose(args, cfg) -> int:
    report = _pipeline(args, cfg).propose()
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    p = _pipeline(args, cfg)
    p.train(args.mode)
    print(f"{args.mode} checkpoint written to {p.ckpt_path(args.mode)}")
    return EXIT_OK


def cmd_mine(args, cfg) -> int:
    p = _pipeline(args, cfg)
    p.mine()
    print(f"mined checkpoint written to {p.ckpt_path('mined')}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    p = _pipeline(args, cfg)
    metrics = p.evaluate(args.mode)
    print(_table(metrics))
    print(f"figures and tables in {p.out / 'eval'}")
    return EXIT_OK


def _table(metrics: dict) -> str:
    head = ["model", "ap", "fp_at_recall", "max_recall", "rot10", "rot20", "rot30"]
    lines = ["\t".join(head)]
    for r in metrics["models"]:
        rot = r.get("rotation_proposals") or {}
        fp = r["fp_at_recall"]
        lines.append("\t".join([r["model"], f"{r['ap']:.4f}", "inf" if math.isinf(fp) else str(int(fp)),
                                f"{r['max_recall']:.4f}",
                                *(f"{rot[k]:.4f}" if k in rot else "-" for k in ("10", "20", "30"))]))
    pr = metrics["proposals"]
    lines.append(f"# proposals: recall {pr['recall']:.4f}  mabo {pr['mabo']:.4f}  per image {pr['per_image']:.1f}")
    return "\n".join(lines)


def cmd_gradcheck(args, cfg) -> int:
    from derotnet.checks import TOLERANCE, run_gradient_suite

    results = run_gradient_suite(cfg.seed)
    print("op\twrt\tmax_rel_error\tstatus")
    for r in results:
        print(f"{r.op}\t{r.wrt}\t{r.max_rel_error:.3e}\t{'ok' if r.passed else 'FAIL'}")
    bad = [r for r in results if not r.passed]
    if bad:
        print(f"{len(bad)} check(s) above {TOLERANCE:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "calibrate": cmd_calibrate, "propose": cmd_propose, "train": cmd_train,
    "mine": cmd_mine, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _limit_threads()
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from derotnet.errors import DerotError

    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](args, cfg)
    except DerotError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
