#!/usr/bin/env python3
"""Run the pipeline on several synthetic seeds and compare final masks against the prior.

    python3 scripts/run_synth_benchmark.py --config configs/acceptance.cfg --out runs/benchmark

Exit status is 0 when every threshold in the config's [acceptance] section holds.
"""

import argparse
import logging
import sys

from denver.benchmark import run_benchmark
from denver.config import load_config


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default="configs/acceptance.cfg")
    parser.add_argument("--out", default="runs/benchmark")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, args.set)
    result = run_benchmark(cfg, args.out, progress=lambda r: logging.info(
        "seed %d: prior %.4f final %.4f (%.0f s)", r["seed"], r["prior_dice"], r["dice"], r["wall_time"]))
    print(result.summary())
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
