"""Command-line entry point: ``ibvi <experiment> [options]``.

Exit status is 0 on success, 1 when ``--check`` is given and an acceptance
check fails, 2 for configuration errors and 3 when training diverges.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from ..optim import TrainingDivergedError
from .config import EXPERIMENTS, ConfigError, load_config
from .experiments import run
from .results import write_outputs

log = logging.getLogger("ibvi")

EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ibvi",
        description="Run an implicit-bias variational inference experiment and write CSV results.",
    )
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", help="INI file with [run], [dims], [optimizer], [parametrization], [params] sections")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override one config entry (repeatable)")
    ap.add_argument("--out", help="output directory (default: <run.output_dir>/<experiment>)")
    ap.add_argument("--check", action="store_true", help="exit with status 1 if any acceptance check fails")
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads for replicas and sweep points")
    ap.add_argument("--seed", type=int, help="shorthand for --set run.seed=SEED")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.threads < 1:
        log.error("--threads must be >= 1")
        return EXIT_CONFIG
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    try:
        cfg = load_config(args.experiment, args.config, overrides)
    except (ConfigError, OSError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG

    out_dir = args.out or os.path.join(cfg.get("run", "output_dir"), args.experiment)
    start = time.perf_counter()
    try:
        result = run(cfg, threads=args.threads)
    except TrainingDivergedError as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except ValueError as exc:
        log.error("invalid experiment setup: %s", exc)
        return EXIT_CONFIG
    wall = time.perf_counter() - start

    paths = write_outputs(result, cfg, out_dir, wall)
    log.info("%s finished in %.1f s; wrote %d files to %s", args.experiment, wall, len(paths), out_dir)
    for c in result.checks:
        log.info("[%s] %s %s", "pass" if c.passed else "FAIL", c.name, c.detail)
    if args.check and not result.passed:
        return EXIT_CHECK_FAILED
    return 0


if __name__ == "__main__":
    sys.exit(main())
