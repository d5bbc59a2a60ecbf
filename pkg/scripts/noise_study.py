"""Sweep every desk2d algorithm at each noise level and print the result tables.

    python3 scripts/noise_study.py [--config desk2d] [--override section.key=value ...]
"""

import argparse
import logging
import time
import warnings

from dynmpi.analysis import metrics_table
from dynmpi.config import load_config
from dynmpi.experiments import calibrate, noise_study, simulate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="desk2d")
    ap.add_argument("--override", action="append", default=[])
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    warnings.simplefilter("ignore")

    t0 = time.perf_counter()
    cfg = load_config(args.config, args.override)
    study = noise_study(cfg, calibrate(cfg), simulate(cfg))
    print("best SSIM")
    print(metrics_table(study.best_ssim()))
    print("mass CoV of the best-SSIM run")
    print(metrics_table(study.best_cov()))
    for lvl, algos in study.ranked.items():
        for algo, ranked in algos.items():
            top = ranked[0]
            print(f"noise {lvl:g} {algo}: ssim {top.ssim:.4f} params {top.params}")
    print(f"{time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
