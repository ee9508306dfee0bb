#!/usr/bin/env python3
"""Macro per-user WER of the main conditions across benchmark seeds, one row per seed and split.

Usage: python scripts/seed_table.py --work /tmp/seeds --seeds 0 1 2 3 4 [--out table.tsv]
"""
import argparse
import sys
from pathlib import Path

from userlibri.experiment import Experiment, ExperimentConfig
from userlibri.synthetic import SyntheticConfig, generate

COLUMNS = ("BL1", "BL2", "P13N", "P13N-S", "P13N-L", "BL1-CV", "P13N-CV", "ADAPT", "ADAPT+P13N")


def conditions(exp):
    return {
        "BL1": exp.bl1(), "BL2": exp.bl2(), "P13N": exp.p13n(),
        "P13N-S": exp.p13n("S"), "P13N-L": exp.p13n("L"),
        "BL1-CV": exp.folded("BL1-CV", None), "P13N-CV": exp.folded("P13N-CV", exp.p13n_lm),
        "ADAPT": exp.adapted(False), "ADAPT+P13N": exp.adapted(True),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--work", required=True, type=Path)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--out", type=Path)
    args = parser.parse_args(argv)

    lines = ["seed\tsplit\t" + "\t".join(COLUMNS)]
    for seed in args.seeds:
        root = args.work / f"seed{seed}"
        if not (root / "metadata.tsv").exists():
            generate(root, SyntheticConfig(seed=seed))
        exp = Experiment(root, ExperimentConfig(seed=seed))
        results = conditions(exp)
        for split in exp.splits:
            vals = [100 * exp.summarize(results[c], split).macro_wer for c in COLUMNS]
            lines.append(f"{seed}\t{split}\t" + "\t".join(f"{v:.1f}" for v in vals))
            print(lines[-1], flush=True)
    if args.out:
        args.out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


if __name__ == "__main__":
    sys.exit(main())
