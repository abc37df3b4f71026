"""Main entry point for the ccnf command line."""

import logging
import sys

from src.errors import CcnfError
from src.handlers import (
    cmd_calibrate,
    cmd_coverage,
    cmd_region,
    cmd_sample,
    cmd_simulate,
    cmd_train,
)
from src.parser import overrides_from_args, parse_input
from src.persistence import resolve_out_dir
from src.run_config import RunConfig

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_commands():
    """Sets up command mappings to handler functions."""
    return {
        "simulate": cmd_simulate,
        "train": cmd_train,
        "calibrate": cmd_calibrate,
        "region": cmd_region,
        "coverage": cmd_coverage,
        "sample": cmd_sample,
    }


def setup_logging(verbose=False, quiet=False):
    """Root logging at DEBUG with -v, WARNING with -q, INFO otherwise."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def load_config(args):
    """The run configuration file (or defaults) with command-line overrides applied."""
    config = RunConfig.load(args.config) if args.config else RunConfig()
    return config.with_overrides(overrides_from_args(args))


def run(argv=None):
    """Runs one command and returns its exit code."""
    command, args = parse_input(argv)
    setup_logging(args.verbose, args.quiet)

    try:
        config = load_config(args)
    except CcnfError as e:
        logger.error("Error: %s", e)
        return e.exit_code
    out_dir = resolve_out_dir(args.out, config.out_dir)
    return setup_commands()[command](config, out_dir)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
