"""Desk-scale reproduction of the statistical calibration study and the robust check.

Samples five ground-truth parameter sets from a fixed master seed, generates
markets with 10^6 paths, calibrates with training paths capped at 5 * 10^4
and evaluates at 10^6 paths. Then calibrates against four perturbed markets
and reports the share of strikes inside their IV envelope.

This is a long-running job. Usage:

    python scripts/reproduce_desk.py [--jobs N] [--seed N] [--out DIR]
"""

# MIT License
#
# Copyright (c) 2024 Dean Thompson

import argparse
import logging
import logging.config
import sys
from pathlib import Path

import numpy as np

from lsv_calib import rng, settings
from lsv_calib.ground_truth import sample_xi
from lsv_calib.stat_test import RunConfig, run_robust, run_stat_test

logger = logging.getLogger(__name__)

MAX_ERROR = 0.01
MEAN_ERROR = 0.005
REQUIRED_RUNS = 4
ENVELOPE_SHARE = 0.9


def main() -> None:
    logging.config.dictConfig(settings.DEFAULT_LOGGING)
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawTextHelpFormatter)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--seed", type=int, default=2024)
    parser.add_argument("--out", type=Path, default=Path("desk_reproduction"))
    args = parser.parse_args()

    config = RunConfig.from_sources("desk", overrides={"seed": args.seed, "jobs": args.jobs})
    summary = run_stat_test(config, args.out / "stat_test")
    passed = 0
    for run in summary.runs:
        if run.skipped:
            print(f"run {run.run_id}: skipped ({run.skip_reason})")
            continue
        per_slice_max = np.max(run.abs_errors, axis=1)
        per_slice_mean = np.mean(run.abs_errors, axis=1)
        ok = bool(np.all(per_slice_max <= MAX_ERROR) and np.all(per_slice_mean <= MEAN_ERROR))
        passed += ok
        print(f"run {run.run_id}: max {per_slice_max.max():.4f}, mean {per_slice_mean.max():.4f} -> {'ok' if ok else 'FAIL'}")
    print(f"{passed} of {summary.run_count} runs within tolerance (need {REQUIRED_RUNS})")

    xi = sample_xi(rng.derive_seed(args.seed, rng.TAG_MARKET, 0))
    robust = run_robust(xi, config, args.seed)
    print(f"robust: {robust.envelope_share:.1%} of strikes inside the envelope (need {ENVELOPE_SHARE:.0%})")
    if passed < REQUIRED_RUNS or not robust.envelope_share >= ENVELOPE_SHARE:
        sys.exit(1)


if __name__ == "__main__":
    main()
