"""Command line entry point: ``atkf {generate,train,eval,reproduce}``."""

from __future__ import annotations

import argparse
import logging
import sys

from .experiment import ExperimentConfig, StageError, cmd_eval, cmd_generate, cmd_reproduce, cmd_train


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with ExperimentConfig fields")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--levels", help="comma-separated q2=r2 values, e.g. 1,4,16")
    common.add_argument("--regime", choices=["noise", "mismatch"])
    common.add_argument("--skip-pretrain", action="store_true", help="end-to-end training only")
    common.add_argument("--particles", type=int, help="particle filter size")
    common.add_argument("--trajectory-dump", type=int, metavar="INDEX",
                        help="write per-step true/estimated states of one test trajectory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="atkf", description="Attention Kalman filter experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write train/val/test datasets")
    sub.add_parser("train", parents=[common], help="pre-train and train the gain network")
    sub.add_parser("eval", parents=[common], help="evaluate EKF/UKF/PF/AtKF on the test sets")
    sub.add_parser("reproduce", parents=[common], help="generate, train and evaluate both studies")
    return parser


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out:
        d["out"] = args.out
    if args.levels:
        d["noise_levels"] = [float(v) for v in args.levels.split(",") if v.strip()]
    if args.regime:
        d["regime"] = args.regime
    if args.skip_pretrain:
        d["skip_pretrain"] = True
    if args.particles is not None:
        d["particles"] = args.particles
    return ExperimentConfig(**d)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = config_from_args(args)
    except (ValueError, TypeError, OSError) as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, trajectory_dump=args.trajectory_dump)
        else:
            print(cmd_reproduce(cfg, trajectory_dump=args.trajectory_dump))
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure must exit nonzero with a stage tag
        print(f"[{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
