"""Command line entry point: ``tarc {train,eval,sweep,perturb} --config run.yaml``.

Exit codes: 0 ok, 2 config error, 3 training failure, 4 artifact mismatch.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from dataclasses import replace

from .config import ConfigError, RunConfig, load_config
from .experiment import ArtifactMismatch, run_eval, run_perturb, run_sweep, run_train
from .ppo import TrainingDiverged

log = logging.getLogger("tarc")

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_ARTIFACT = 0, 2, 3, 4


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (YAML)")
    common.add_argument("--out", help="override output_dir")
    common.add_argument("--seeds", type=_int_list, help="override the seed list, e.g. 0,1,2")
    common.add_argument("--workers", type=int, default=1, help="parallel seed processes")
    common.add_argument("--deterministic", action="store_true",
                        help="pin BLAS to one thread so floating point reductions are reproducible")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tarc", description="Time-adaptive control experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train one policy per seed")

    p = sub.add_parser("eval", parents=[common], help="evaluate trained checkpoints")
    p.add_argument("--checkpoint", help="evaluate this checkpoint for every seed instead of each seed's own")
    p.add_argument("--episodes", type=int, help="episodes per seed (default: eval.episodes)")

    p = sub.add_parser("sweep", parents=[common], help="train and evaluate over switch costs")
    p.add_argument("--costs", type=_float_list, required=True, help="switch costs, e.g. 0,0.01,0.05")
    p.add_argument("--episodes", type=int, help="episodes per seed (default: eval.episodes)")

    p = sub.add_parser("perturb", parents=[common], help="frequency trace under the configured push schedule")
    p.add_argument("--checkpoint", help="use this checkpoint for every seed")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if args.seeds is not None:
        if not args.seeds or len(set(args.seeds)) != len(args.seeds):
            raise ConfigError("seeds", "override must be a non-empty list of distinct integers")
        cfg = replace(cfg, seeds=tuple(args.seeds))
    return cfg


def _episodes(args, cfg: RunConfig) -> int:
    n = cfg.eval.episodes if args.episodes is None else args.episodes
    if n < 1:
        raise ConfigError("episodes", "must be >= 1")
    return n


def run(args) -> int:
    if args.workers < 1:
        raise ConfigError("workers", "must be >= 1")
    cfg = resolve_config(args)
    if args.command == "train":
        run_train(cfg, args.workers)
    elif args.command == "eval":
        _, report = run_eval(cfg, _episodes(args, cfg), args.checkpoint, args.workers)
        m = report.metrics
        log.info("%s: unpenalized %.2f, penalized %.2f, avg frequency %.2f Hz over %d seed(s)", cfg.run_name,
                 m["unpenalized_return"].mean, m["penalized_return"].mean, m["avg_frequency"].mean, report.n_seeds)
    elif args.command == "sweep":
        if not args.costs or any(c < 0 for c in args.costs):
            raise ConfigError("costs", "need at least one non-negative switch cost")
        run_sweep(cfg, args.costs, args.workers, _episodes(args, cfg))
    elif args.command == "perturb":
        run_perturb(cfg, args.checkpoint)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    limit = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(limits=1)
    try:
        with limit:
            return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except ArtifactMismatch as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
