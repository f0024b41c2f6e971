#!/usr/bin/env python3
"""End-to-end toy experiment: generate data, train the default model, evaluate.

Equivalent to:
    changecap gen-data --out <workdir>/data --seed 7
    changecap train data_dir=<workdir>/data out_dir=<workdir>/run
    changecap eval --checkpoint <workdir>/run/best.camc --split test
but kept as one script so the whole pipeline is reproducible in one command.
"""

import argparse
import json
import time
from pathlib import Path

from changecap.config import RunConfig
from changecap.toyworld import build_dataset, save_dataset
from changecap.train import evaluate_split, prepare_split, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="runs/toy_experiment")
    ap.add_argument("--train-samples", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("overrides", nargs="*", metavar="key=value")
    args = ap.parse_args()

    work = Path(args.workdir)
    t0 = time.perf_counter()
    ds = build_dataset(args.train_samples, 200, 200, seed=args.seed)
    save_dataset(ds, work / "data")
    print(f"dataset ready ({time.perf_counter() - t0:.1f}s, vocab {len(ds.vocab)})")

    from changecap.config import load_config
    cfg = load_config(None, [f"seed={args.seed}", f"data_dir={work / 'data'}",
                             f"out_dir={work / 'run'}"] + args.overrides)
    result = train(cfg, ds, log=print)
    print(f"training done in {time.perf_counter() - t0:.1f}s "
          f"(best val loss {result.best_val:.4f})")

    for split in ("val", "test"):
        prep = prepare_split(ds.split(split), ds.vocab, cfg.patch, cfg.max_decode_len)
        outcome = evaluate_split(result.model, prep, ds.vocab, cfg.max_decode_len)
        payload = outcome.report.to_dict()
        payload["exact_match"] = outcome.exact_match
        print(split, json.dumps({k: round(v, 2) for k, v in payload.items()}))


if __name__ == "__main__":
    main()
