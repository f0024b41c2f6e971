#!/usr/bin/env python3
"""Run the three ablation matrices at a reduced toy budget and print tables.

Each variant trains from scratch for every seed, so expect roughly an hour
of CPU time for all three matrices at the default budget.
"""

import argparse
from pathlib import Path

from changecap.config import load_config
from changecap.toyworld import build_dataset, save_dataset
from changecap.train import ablation_markdown, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="runs/ablations")
    ap.add_argument("--matrices", default="table2,table3,table4")
    ap.add_argument("--seeds", default="7,8,9")
    ap.add_argument("--train-samples", type=int, default=600)
    ap.add_argument("--epochs", type=int, default=12)
    args = ap.parse_args()

    work = Path(args.workdir)
    ds = build_dataset(args.train_samples, 150, 150, seed=7)
    save_dataset(ds, work / "data")
    base = load_config(None, [f"data_dir={work / 'data'}", f"out_dir={work / 'runs'}",
                              f"epochs={args.epochs}"])
    seeds = [int(s) for s in args.seeds.split(",")]
    for matrix in args.matrices.split(","):
        rows = run_ablation(matrix, base, ds, seeds, log=print)
        table = ablation_markdown(matrix, rows)
        (work / f"ablation_{matrix}.md").write_text(table)
        print(table)


if __name__ == "__main__":
    main()
