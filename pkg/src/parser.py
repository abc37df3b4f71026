"""Command-line parsing."""

import argparse

from src.config import OUT_DIR_ENV
from src.help import COMMANDS, display_help

SEEDED_SECTIONS = ("data", "split", "train", "region")


def build_parser():
    """Argument parser for one pipeline command and the run options shared by every command."""
    parser = argparse.ArgumentParser(
        prog="ccnf",
        description="Conformal joint prediction regions from a conditional normalising flow.",
        epilog=display_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("command", choices=list(COMMANDS), help="pipeline stage to run")
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="seed for every stochastic step")
    parser.add_argument("--epsilon", type=float, action="append",
                        help="significance level; repeat for several")
    parser.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV} or ./ccnf-out)")
    parser.add_argument("--series", type=int, help="test-series index for region and sample")
    parser.add_argument("--mode", choices=["grid", "mc"], help="region construction")
    parser.add_argument("--epochs", type=int, help="training epochs")
    parser.add_argument("--n-samples", type=int, help="flow samples for mc regions")
    parser.add_argument("--cells", type=int, help="grid cells per label coordinate")
    parser.add_argument("--volume", action="store_true",
                        help="coverage: also report region and box volumes")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    return parser


def overrides_from_args(args):
    """Dotted-key configuration overrides for the flags that were given."""
    overrides = {
        "epsilons": args.epsilon,
        "region.series": args.series,
        "region.mode": args.mode,
        "train.epochs": args.epochs,
        "region.n_samples": args.n_samples,
        "region.cells": args.cells,
    }
    if args.seed is not None:
        for section in SEEDED_SECTIONS:
            overrides[f"{section}.seed"] = args.seed
    if args.volume:
        overrides["region.compute_volume"] = True
    return overrides


def parse_input(argv=None):
    """Parses argv into (command, namespace)."""
    args = build_parser().parse_args(argv)
    return args.command, args
