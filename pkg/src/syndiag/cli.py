"""Command-line entry point: one verb per pipeline stage, plus ``run`` for the configured sequence."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import STAGES, Pipeline, StageDependencyError, load_config


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config overlaid on the preset")
    common.add_argument("--preset", choices=("toy", "cwru", "seu"), help="base preset (default: toy)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out-dir", type=Path, default=Path("runs/toy"), help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="syndiag", description="Few-shot fault diagnosis pipeline.")
    sub = p.add_subparsers(dest="verb", required=True)
    helps = {
        "gen-data": "generate (or load) windows and CWT images",
        "pretrain": "cross-modal alignment of the visual extractor",
        "finetune": "few-shot fine-tuning of the teacher",
        "distill": "feature distillation into the student",
        "online-update": "edge head updates with cloud hot-swap",
        "eval": "score checkpoints and sweep shots per condition",
        "cross-eval": "fine-tune on one condition, test on every condition",
        "resources": "parameter counts and median timings",
        "report": "collect report.json and render figures",
    }
    for verb in STAGES:
        sub.add_parser(verb, parents=[common], help=helps[verb])
    run = sub.add_parser("run", parents=[common], help="run the stages listed in the config")
    run.add_argument("--stages", nargs="+", choices=STAGES, help="override the configured stage list")
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.preset, args.seed)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if args.verb == "show-config":
        print(json.dumps(cfg, indent=2))
        return 0
    pipe = Pipeline(cfg, args.out_dir)
    stages = (args.stages or cfg["stages"]) if args.verb == "run" else [args.verb]
    try:
        for stage in stages:
            result = pipe.run(stage)
            print(f"== {stage}")
            print(json.dumps(_summary(stage, result), indent=2))
    except StageDependencyError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


def _summary(stage: str, result: dict) -> dict:
    """Trim bulky fields (confusion matrices, per-step lists) for the terminal."""
    def trim(x):
        if isinstance(x, dict):
            return {k: trim(v) for k, v in x.items() if k not in ("confusion", "support", "probe_mse", "epoch_losses")}
        if isinstance(x, list) and len(x) > 12:
            return f"[{len(x)} items]"
        return x
    return trim(result)


if __name__ == "__main__":
    sys.exit(main())
