#!/usr/bin/env python3
"""Generate the synthetic benchmark for one seed and run every preset, the limited-data trend and the weight sweep.

Usage: python scripts/run_grid.py --out runs/seed0 [--seed 0] [--config my.ini]
"""
import argparse
import sys
import time
from pathlib import Path

from userlibri.experiment import PRESETS, Experiment, load_config, run_limited, run_preset, run_sweep
from userlibri.synthetic import SyntheticConfig, generate


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", help="INI overrides for the pipeline and decoder")
    parser.add_argument("--dataset", type=Path, help="use an existing forged dataset instead of generating one")
    args = parser.parse_args(argv)

    root = args.dataset
    if root is None:
        root = args.out / "dataset"
        if not (root / "metadata.tsv").exists():
            generate(root, SyntheticConfig(seed=args.seed))
    exp = Experiment(root, load_config(args.config, args.seed))
    for preset in PRESETS:
        start = time.perf_counter()
        run_preset(preset, exp, args.out / preset)
        print(f"== {preset} ({time.perf_counter() - start:.0f}s)")
        print((args.out / preset / "report.txt").read_text(), end="")
    run_limited(exp, args.out / "limited")
    print("== limited\n" + (args.out / "limited" / "limited.tsv").read_text(), end="")
    run_sweep(exp, args.out / "sweep")
    print("== sweep\n" + (args.out / "sweep" / "sweep.tsv").read_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
