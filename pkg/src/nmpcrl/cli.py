"""Command-line entry point: train or evaluate a controller-tuning run."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_config
from .harness import evaluate, train
from .learning import ALGORITHMS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nmpcrl",
        description="Tune the weights of a nonlinear MPC with "
                    "Expected-Sarsa-family reinforcement learning.")
    parser.add_argument("--algo", choices=ALGORITHMS, default=None,
                        help="learning algorithm (default: from config, else ges)")
    parser.add_argument("--episodes", type=int, default=None)
    parser.add_argument("--steps", type=int, default=None,
                        help="environment steps per episode")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--config", type=Path, default=None,
                        help="TOML run configuration")
    parser.add_argument("--out", type=Path, default=None,
                        help="output directory for CSV logs and checkpoints")
    parser.add_argument("--resume", type=Path, default=None, metavar="DIR",
                        help="continue from the checkpoint in DIR")
    parser.add_argument("--eval-only", action="store_true",
                        help="run one greedy episode without learning")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config) if args.config else RunConfig()
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: cannot load config: {exc}", file=sys.stderr)
        return 2

    overrides = {}
    if args.algo is not None:
        overrides["algorithm"] = args.algo
    if args.episodes is not None:
        overrides["episodes"] = args.episodes
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        if overrides:
            config = replace(config, **overrides)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out_dir = args.out
    if args.resume is not None:
        out_dir = args.resume
        if not (Path(out_dir) / "checkpoint.npz").exists():
            print(f"error: no checkpoint.npz in {out_dir}", file=sys.stderr)
            return 2
    if out_dir is not None:
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            probe = out_dir / ".write-probe"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            print(f"error: output directory not writable: {exc}", file=sys.stderr)
            return 2

    try:
        if args.eval_only:
            log = evaluate(config, out_dir=out_dir)
            ep = log.episodes[0]
            print(f"eval: sum stage cost {ep.sum_stage_cost:.4f}, "
                  f"static error {ep.static_error:.4f} m, "
                  f"min clearance {ep.min_clearance:.4f} m")
            return 0
        log = train(config, out_dir=out_dir, resume=args.resume is not None)
    except Exception as exc:           # unexpected; report, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1

    for ep in log.episodes:
        print(f"episode {ep.episode:4d}: sum stage cost {ep.sum_stage_cost:10.3f}"
              f"  static error {ep.static_error:7.4f} m")
    if log.diverged:
        print(f"run diverged: {log.divergence_message}", file=sys.stderr)
        return 3
    if log.final_theta is not None:
        vals = ", ".join(f"{v:.6g}" for v in log.final_theta.as_array())
        print(f"final theta: [{vals}]")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
