"""Command-line surface: data generation, training, evaluation, verification.

Exit codes: 0 success, 1 verification failure, 2 usage/environment error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, restore_parameters
from .config import UsageError, load_config, parse_config_text
from .model import build_model
from .nn import named_parameters
from .toyworld import build_dataset, load_dataset, save_dataset
from .train import (ABLATION_MATRICES, TrainingError, ablation_markdown,
                    evaluate_split, prepare_split, run_ablation, train)
from .verification import SCOPES, THRESHOLDS, bench_scan, run_scopes


class VerificationFailure(RuntimeError):
    """A numerical contract was violated; maps to exit code 1."""


def _cmd_gen_data(args) -> None:
    if min(args.train, args.val, args.test) < 1:
        raise UsageError("split sizes must be >= 1")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {out}: {e}") from None
    ds = build_dataset(args.train, args.val, args.test, args.seed)
    save_dataset(ds, out)
    counts = {name: len(split.samples) for name, split in ds.splits.items()}
    print(f"wrote dataset to {out}: splits={counts} vocab={len(ds.vocab)}")


def _load_dataset_or_die(data_dir: str):
    root = Path(data_dir)
    if not (root / "vocab.txt").exists():
        raise UsageError(f"no dataset found under {root} (run gen-data first)")
    return load_dataset(root)


def _cmd_train(args) -> None:
    cfg = load_config(args.config, args.overrides)
    dataset = _load_dataset_or_die(cfg.data_dir)
    result = train(cfg, dataset, resume=args.resume, log=print)
    print(f"best val loss {result.best_val:.4f}; checkpoint: {result.checkpoint_path}")


def _cmd_eval(args) -> None:
    ck_path = Path(args.checkpoint)
    if not ck_path.exists():
        raise UsageError(f"checkpoint not found: {ck_path}")
    ck = load_checkpoint(ck_path)
    cfg = parse_config_text(ck.config_text)
    data_dir = args.data if args.data else cfg.data_dir
    dataset = _load_dataset_or_die(data_dir)
    if dataset.vocab.tokens != ck.vocab_tokens:
        raise UsageError("vocabulary mismatch between checkpoint and dataset")
    model = build_model(cfg, dataset.vocab)
    restore_parameters(named_parameters(model), ck.params)
    split = dataset.split(args.split)
    prep = prepare_split(split, dataset.vocab, cfg.patch, cfg.max_decode_len)
    outcome = evaluate_split(model, prep, dataset.vocab, cfg.max_decode_len,
                             oracle=args.oracle)

    out_dir = Path(args.out) if args.out else Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pred_lines = []
    for s, hyp in zip(split.samples, outcome.hypotheses):
        pred_lines.append(json.dumps({"sample_id": s.sample_id, "hypothesis": hyp,
                                      "references": s.references}, sort_keys=True))
    _atomic(out_dir / f"predictions_{args.split}.jsonl", "\n".join(pred_lines) + "\n")
    payload = outcome.report.to_dict()
    payload["exact_match"] = outcome.exact_match
    payload["split"] = args.split
    payload["n_samples"] = len(outcome.hypotheses)
    _atomic(out_dir / f"eval_{args.split}.json", json.dumps(payload, sort_keys=True) + "\n")
    csv_path = out_dir / "eval_history.csv"
    header = "split," + outcome.report.CSV_HEADER + ",exact_match"
    line = f"{args.split},{outcome.report.csv_row()},{outcome.exact_match:.4f}"
    existing = csv_path.read_text().splitlines() if csv_path.exists() else [header]
    _atomic(csv_path, "\n".join(existing + [line]) + "\n")
    print(json.dumps(payload, sort_keys=True))


def _cmd_gradcheck(args) -> None:
    scopes = list(SCOPES) if args.scope == "all" else [args.scope]
    details, failures = run_scopes(scopes)
    for scope in scopes:
        worst = max(details[scope].values())
        status = "ok" if all(not f.startswith(f"{scope}:") for f in failures) else "FAIL"
        print(f"{scope}: max rel-err {worst:.3e} (threshold {THRESHOLDS[scope]:.0e}) {status}")
    if failures:
        for f in failures:
            print(f"  breach: {f}")
        raise VerificationFailure(f"{len(failures)} gradient check(s) out of tolerance")


def _cmd_bench_scan(args) -> None:
    lengths = [int(x) for x in args.lengths.split(",") if x]
    impls = [x.strip() for x in args.impl.split(",") if x]
    for impl in impls:
        if impl not in ("seq", "par"):
            raise UsageError(f"unknown scan impl '{impl}'")
    try:
        rows = bench_scan(lengths, impls=impls)
    except AssertionError as e:
        raise VerificationFailure(str(e)) from None
    lines = ["impl,L,median_ms"]
    for r in rows:
        lines.append(f"{r['impl']},{r['L']},{r['median_ms']:.3f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        _atomic(Path(args.out), text)
    print(text, end="")

    seq_times = {r["L"]: r["median_ms"] for r in rows if r["impl"] == "seq"}
    for lo, hi in zip(lengths, lengths[1:]):
        # per-call overhead swamps the arithmetic below ~1k steps, so the
        # linearity assertion only applies to the longer pairs
        if hi == 2 * lo and lo >= 1024 and lo in seq_times and hi in seq_times:
            ratio = seq_times[hi] / seq_times[lo]
            print(f"seq t({hi})/t({lo}) = {ratio:.2f}")
            if not 1.6 <= ratio <= 2.6:
                raise VerificationFailure(
                    f"sequential scan ratio t({hi})/t({lo})={ratio:.2f} outside [1.6, 2.6]")


def _cmd_ablate(args) -> None:
    base = load_config(args.config, args.overrides)
    dataset = _load_dataset_or_die(base.data_dir)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    rows = run_ablation(args.matrix, base, dataset, seeds, log=print)
    table = ablation_markdown(args.matrix, rows)
    out_dir = Path(base.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic(out_dir / f"ablation_{args.matrix}.md", table)
    print(table)


def _atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="changecap",
                                description="Bi-temporal change captioning toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=2000)
    g.add_argument("--val", type=int, default=200)
    g.add_argument("--test", type=int, default=200)
    g.add_argument("--seed", type=int, default=7)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="train a captioning model")
    t.add_argument("--config", default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("overrides", nargs="*", metavar="key=value")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="greedy-decode a split and score it")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--data", default=None, help="dataset dir (default: from config)")
    e.add_argument("--out", default=None, help="output dir (default: from config)")
    e.add_argument("--oracle", action="store_true",
                   help="score reference[0] instead of model output")
    e.set_defaults(fn=_cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference verification suites")
    c.add_argument("--scope", default="all", choices=SCOPES + ("all",))
    c.set_defaults(fn=_cmd_gradcheck)

    b = sub.add_parser("bench-scan", help="time the scan kernels")
    b.add_argument("--lengths", default="512,1024,2048,4096")
    b.add_argument("--impl", default="seq,par")
    b.add_argument("--out", default=None, help="CSV output path")
    b.set_defaults(fn=_cmd_bench_scan)

    a = sub.add_parser("ablate", help="train and score a variant matrix")
    a.add_argument("--matrix", required=True, choices=tuple(ABLATION_MATRICES))
    a.add_argument("--config", default=None)
    a.add_argument("--seeds", default="7,8,9")
    a.add_argument("overrides", nargs="*", metavar="key=value")
    a.set_defaults(fn=_cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.fn(args)
        return 0
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except VerificationFailure as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return 1
    except TrainingError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
