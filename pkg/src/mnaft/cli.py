"""Command-line entry point: ``mnaft <stage> [--config PATH] [--out DIR] [--seed N]``.

Logs go to stderr; each stage prints one JSON summary line on stdout.
Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .checkpoint import CheckpointError
from .config import load_config, with_overrides
from .maskedft import MODES

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2

log = logging.getLogger("mnaft")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--out", help="run directory (overrides the config)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="mnaft", description="Neuron-aware masked fine-tuning on a toy suite")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic task suite")
    sub.add_parser("train-base", parents=[common], help="train the base model on all tasks")
    p = sub.add_parser("score", parents=[common], help="score neurons and select layers")
    p.add_argument("--with-oracle", action="store_true", help="also run the exact-ablation comparison")
    sub.add_parser("partition", parents=[common], help="split neurons into general and specific sets")
    p = sub.add_parser("finetune", parents=[common], help="masked fine-tuning on one task")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--task", type=int)
    sub.add_parser("eval", parents=[common], help="evaluate every checkpoint on every task")
    sub.add_parser("report", parents=[common], help="write profile, projection and summary files")
    return parser


def _dispatch(args, cfg) -> dict:
    if args.command == "gen-data":
        return pipeline.gen_data(cfg)
    if args.command == "train-base":
        return pipeline.train_base(cfg)
    if args.command == "score":
        return pipeline.score(cfg, with_oracle=args.with_oracle)
    if args.command == "partition":
        return pipeline.partition(cfg)
    if args.command == "finetune":
        return pipeline.finetune_stage(cfg, args.mode, args.task)
    if args.command == "eval":
        return pipeline.eval_stage(cfg)
    return pipeline.report(cfg)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = with_overrides(load_config(args.config), seed=args.seed, out=args.out)
        cfg.validate()
        summary = _dispatch(args, cfg)
    except (CheckpointError, ValueError, TypeError) as exc:
        log.error("validation error: %s", exc)
        return EXIT_INVALID
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    print(json.dumps(summary, sort_keys=True), flush=True)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
