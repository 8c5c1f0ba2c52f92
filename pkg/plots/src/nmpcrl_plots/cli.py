"""Command line for rendering figures from training-run directories."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .figures import FIGURE_KINDS, FigureSpec, SchemaError, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nmpcrl-plot",
        description="Render a figure from one or more training-run "
                    "directories (episodes.csv / theta.csv / config-echo).")
    parser.add_argument("--kind", required=True, choices=FIGURE_KINDS)
    parser.add_argument("--runs", required=True, nargs="+", type=Path,
                        metavar="DIR")
    parser.add_argument("--out", required=True, type=Path,
                        help="output image path (.png, .svg, .pdf)")
    parser.add_argument("--episodes", nargs=2, type=int, metavar=("FIRST", "LAST"),
                        default=None, help="inclusive episode filter")
    parser.add_argument("--steps", nargs=2, type=int, metavar=("FIRST", "LAST"),
                        default=None, help="inclusive step filter")
    parser.add_argument("--dpi", type=int, default=120)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = FigureSpec(kind=args.kind, runs=args.runs, out=args.out,
                      episodes=tuple(args.episodes) if args.episodes else None,
                      steps=tuple(args.steps) if args.steps else None,
                      dpi=args.dpi)
    try:
        path = render(spec)
    except (SchemaError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
