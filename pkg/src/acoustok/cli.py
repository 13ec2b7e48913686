"""Command-line entry point: one subcommand per pipeline stage.

    acoustok synth    --config cfg.ini         generate a synthetic corpus
    acoustok features --config cfg.ini         extract features from WAV files
    acoustok init     --config cfg.ini         bootstrap initial labels
    acoustok mat      --config cfg.ini         train all levels once
    acoustok mr       --config cfg.ini         one reinforcement round
    acoustok mdnn     --config cfg.ini         train the multi-target network
    acoustok extract  --config cfg.ini         extract bottleneck features
    acoustok iterate  --config cfg.ini         the full loop, all iterations
    acoustok std      --config cfg.ini         rank documents for the queries
    acoustok eval     --config cfg.ini         score against ground truth
    acoustok viz      --config cfg.ini         emit visualization data

Flags --seed and --out override the config file; every stage appends to the
run manifest and is skipped when already complete.
"""

from __future__ import annotations

import argparse
import sys

from .config import PipelineConfig, load_config
from .corpus import AudioError
from .mdnn import MdnnError
from .pipeline import (
    PipelineError,
    RunContext,
    cmd_eval,
    cmd_extract,
    cmd_features,
    cmd_init,
    cmd_iterate,
    cmd_mat,
    cmd_mdnn,
    cmd_mr,
    cmd_std,
    cmd_synth,
    cmd_viz,
)


def _add_common(sub):
    sub.add_argument("--config", help="pipeline config file (INI)")
    sub.add_argument("--seed", type=int, help="override [run] seed")
    sub.add_argument("--out", help="override [run] out directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acoustok", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("synth", "features", "std", "eval", "viz"):
        _add_common(sub.add_parser(name))

    for name in ("init", "mdnn", "extract"):
        p = sub.add_parser(name)
        _add_common(p)
        p.add_argument("--iteration", type=int, default=1)

    p = sub.add_parser("mat")
    _add_common(p)
    p.add_argument("--iteration", type=int, default=1)
    p.add_argument("--round", type=int, default=0, help="reinforcement rounds already applied")

    p = sub.add_parser("mr")
    _add_common(p)
    p.add_argument("--iteration", type=int, default=1)
    p.add_argument("--round", type=int, default=1, help="reinforcement round to run")

    p = sub.add_parser("iterate")
    _add_common(p)
    p.add_argument("--iters", type=int, help="override [run] iterations")
    return parser


def make_context(args) -> RunContext:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "iters", None) is not None:
        cfg.iterations = args.iters
    return RunContext.create(cfg)


def _ensure_corpus(ctx: RunContext):
    if not (ctx.out / "features/corpus.jsonl").exists():
        if ctx.cfg.audio_dir:
            cmd_features(ctx)
        else:
            cmd_synth(ctx)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = make_context(args)
        if args.command == "synth":
            cmd_synth(ctx)
        elif args.command == "features":
            cmd_features(ctx)
        elif args.command == "init":
            cmd_init(ctx, args.iteration)
        elif args.command == "mat":
            cmd_mat(ctx, args.iteration, args.round)
        elif args.command == "mr":
            cmd_mr(ctx, args.iteration, args.round)
        elif args.command == "mdnn":
            cmd_mdnn(ctx, args.iteration)
        elif args.command == "extract":
            cmd_extract(ctx, args.iteration)
        elif args.command == "iterate":
            _ensure_corpus(ctx)
            cmd_iterate(ctx)
        elif args.command == "std":
            cmd_std(ctx)
        elif args.command == "eval":
            cmd_eval(ctx)
        elif args.command == "viz":
            cmd_viz(ctx)
    except (PipelineError, AudioError, MdnnError, ValueError, OSError) as exc:
        print(f"acoustok {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
