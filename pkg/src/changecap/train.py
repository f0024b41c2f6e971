"""Teacher-forced training with Adam, greedy evaluation, and ablation sweeps."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .checkpoint import load_checkpoint, restore_parameters, save_checkpoint
from .config import RunConfig, render_config
from .decoders import greedy_decode_batch
from .model import CaptionModel, build_model
from .nn import named_parameters
from .rng import stream
from .tensor import Tape
from .toyworld import Split, ToyDataset, caption_words, extract_patches
from .vocabulary import BOS, EOS, PAD, Vocabulary


class TrainingError(RuntimeError):
    """Non-finite loss or another unrecoverable training failure."""


class Adam:
    """Standard Adam over a named parameter tree (beta1=0.9, beta2=0.999).

    ``total_steps`` switches on half-cosine decay of the learning rate
    (down to zero at the final step); without it the rate is constant.
    """

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, total_steps: int | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.total_steps = total_steps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.lr
        frac = min(self.step_count / self.total_steps, 1.0)
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * frac))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self) -> None:
        lr_t = self.current_lr()
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for k, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            t.data = t.data - lr_t * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def moment_tree(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_moments(self, stored: dict[str, np.ndarray], step: int) -> None:
        for k in self.params:
            self.m[k] = stored[f"m/{k}"].astype(self.m[k].dtype, copy=True)
            self.v[k] = stored[f"v/{k}"].astype(self.v[k].dtype, copy=True)
        self.step_count = step


@dataclass
class PreparedSplit:
    """Split tensors ready for batching: patch grids and padded token ids."""

    patches_t1: np.ndarray      # (N, L, P*P) float32
    patches_t2: np.ndarray
    token_rows: np.ndarray      # (N, R, T) int64 with PAD tail, R refs each
    references: list[list[str]]


def encode_caption(vocab: Vocabulary, caption: str, max_len: int) -> list[int]:
    ids = [BOS] + vocab.encode_words(caption_words(caption)) + [EOS]
    if len(ids) > max_len + 1:
        raise ValueError(f"caption longer than max_decode_len: {caption!r}")
    return ids


def prepare_split(split: Split, vocab: Vocabulary, patch: int,
                  max_len: int) -> PreparedSplit:
    img1, img2 = split.images()
    p1 = extract_patches(img1, patch)
    p2 = extract_patches(img2, patch)
    n_refs = len(split.samples[0].references)
    width = max_len + 1
    rows = np.full((len(split.samples), n_refs, width), PAD, dtype=np.int64)
    for i, s in enumerate(split.samples):
        for j, ref in enumerate(s.references):
            ids = encode_caption(vocab, ref, max_len)
            rows[i, j, :len(ids)] = ids
    refs = [list(s.references) for s in split.samples]
    return PreparedSplit(patches_t1=p1, patches_t2=p2, token_rows=rows,
                         references=refs)


def _batch_tokens(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trim the common PAD tail and split into decoder input / shifted target."""
    live = np.where((rows != PAD).any(axis=0))[0]
    width = int(live[-1]) + 1 if live.size else 1
    rows = rows[:, :max(width, 2)]
    return rows[:, :-1], rows[:, 1:]


@dataclass
class TrainResult:
    model: CaptionModel
    history: list[dict] = field(default_factory=list)
    best_val: float = float("inf")
    checkpoint_path: Path | None = None


def train(cfg: RunConfig, dataset: ToyDataset, resume: str | None = None,
          log=None) -> TrainResult:
    """Teacher-forced training; writes the per-epoch CSV log and best checkpoint."""
    vocab = dataset.vocab
    model = build_model(cfg, vocab)
    params = named_parameters(model)
    n_train = len(dataset.split("train").samples)
    steps_per_epoch = -(-n_train // cfg.batch)
    opt = Adam(params, lr=cfg.lr, total_steps=steps_per_epoch * cfg.epochs)
    start_epoch = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        restore_parameters(params, ck.params)
        opt.load_moments(ck.moments, ck.step)

    train_prep = prepare_split(dataset.split("train"), vocab, cfg.patch,
                               cfg.max_decode_len)
    val_prep = prepare_split(dataset.split("val"), vocab, cfg.patch,
                             cfg.max_decode_len)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_text = render_config(cfg)
    _atomic_write(out_dir / "config.txt", config_text)

    n_samples, n_refs, _ = train_prep.token_rows.shape
    result = TrainResult(model=model)
    log_rows = ["epoch,train_loss,val_loss,wall_s"]
    t0 = time.perf_counter()

    for epoch in range(start_epoch, cfg.epochs):
        # one pass over samples per epoch; the paraphrase template rotates
        # with the epoch so all references are covered every n_refs epochs
        order = stream(cfg.seed, f"shuffle:{epoch}").permutation(n_samples)
        instances = [(int(i), (epoch + int(i)) % n_refs) for i in order]
        total = 0.0
        scored = 0
        for b0 in range(0, len(instances), cfg.batch):
            chosen = instances[b0:b0 + cfg.batch]
            rows = np.stack([train_prep.token_rows[i, j] for i, j in chosen])
            tok_in, targets = _batch_tokens(rows)
            sample_idx = [i for i, _ in chosen]
            p1 = train_prep.patches_t1[sample_idx]
            p2 = train_prep.patches_t2[sample_idx]
            opt.zero_grad()
            with Tape() as tape:
                loss = model.batch_loss(p1, p2, tok_in, targets)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} batch {b0 // cfg.batch} "
                        f"(samples {sample_idx[:4]}...)")
                tape.backward(loss)
            opt.step()
            weight = int((targets != PAD).sum())
            total += value * weight
            scored += weight
        train_loss = total / max(scored, 1)
        val_loss = evaluate_loss(model, val_prep, cfg.batch)
        wall = time.perf_counter() - t0
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
               "wall_s": wall, "step": opt.step_count}
        result.history.append(row)
        log_rows.append(f"{epoch},{train_loss:.6f},{val_loss:.6f},{wall:.2f}")
        _atomic_write(out_dir / "train_log.csv", "\n".join(log_rows) + "\n")
        if log is not None:
            log(f"epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f} "
                f"({wall:.1f}s)")
        if val_loss < result.best_val:
            result.best_val = val_loss
            path = out_dir / "best.camc"
            save_checkpoint(path, config_text, vocab.tokens, params,
                            opt.moment_tree(), opt.step_count)
            result.checkpoint_path = path
    return result


def evaluate_loss(model: CaptionModel, prep: PreparedSplit, batch: int) -> float:
    """Mean teacher-forced NLL per scored token over all references."""
    n_samples, n_refs, _ = prep.token_rows.shape
    total = 0.0
    scored = 0
    instances = [(i, j) for i in range(n_samples) for j in range(n_refs)]
    for b0 in range(0, len(instances), batch):
        chosen = instances[b0:b0 + batch]
        rows = np.stack([prep.token_rows[i, j] for i, j in chosen])
        tok_in, targets = _batch_tokens(rows)
        sample_idx = [i for i, _ in chosen]
        loss = model.batch_loss(prep.patches_t1[sample_idx],
                                prep.patches_t2[sample_idx], tok_in, targets)
        weight = int((targets != PAD).sum())
        total += loss.item() * weight
        scored += weight
    return total / max(scored, 1)


@dataclass
class EvalOutcome:
    report: metrics_mod.EvalReport
    exact_match: float
    hypotheses: list[str]
    references: list[list[str]]


def evaluate_split(model: CaptionModel, prep: PreparedSplit, vocab: Vocabulary,
                   max_len: int, batch: int = 32,
                   oracle: bool = False) -> EvalOutcome:
    """Greedy-decode every sample and score against its references.

    ``oracle`` scores reference[0] as the hypothesis against the remaining
    references, an upper-bound sanity mode; scoring it against a pool that
    contains itself would be identically 100 BLEU.
    """
    n = prep.patches_t1.shape[0]
    scored_refs = prep.references
    if oracle:
        hyps = [refs[0] for refs in prep.references]
        scored_refs = [refs[1:] for refs in prep.references]
    else:
        hyps = []
        for b0 in range(0, n, batch):
            visual = model.visual_from_patches(prep.patches_t1[b0:b0 + batch],
                                               prep.patches_t2[b0:b0 + batch])
            for ids in greedy_decode_batch(model.decoder, visual, max_len):
                hyps.append(" ".join(vocab.decode_ids(ids)))
    report = metrics_mod.evaluate_captions(hyps, scored_refs)
    exact = 0
    for hyp, refs in zip(hyps, scored_refs):
        toks = metrics_mod.tokenize(hyp)
        if any(toks == metrics_mod.tokenize(r) for r in refs):
            exact += 1
    return EvalOutcome(report=report, exact_match=exact / len(hyps), hypotheses=hyps,
                       references=prep.references)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


# ---- ablation sweeps --------------------------------------------------------

ABLATION_MATRICES = {
    "table2": [
        ("baseline-self-gate", {"gate_variant": "self", "temporal_variant": "off"}),
        ("spatial-diff-only", {"gate_variant": "differential", "temporal_variant": "off"}),
        ("spatial-diff+interleave", {"gate_variant": "differential",
                                     "temporal_variant": "interleave"}),
        ("spatial-diff+length-concat", {"gate_variant": "differential",
                                        "temporal_variant": "length_concat"}),
    ],
    "table3": [
        ("layers-2", {"layers": 2}),
        ("layers-3", {"layers": 3}),
        ("layers-4", {"layers": 4}),
    ],
    "table4": [
        ("decoder-mamba", {"decoder": "mamba"}),
        ("decoder-gpt-style", {"decoder": "gpt_style"}),
        ("decoder-cross-attention", {"decoder": "cross_attention"}),
    ],
}


def run_variant(base: RunConfig, dataset: ToyDataset, overrides: dict, seed: int,
                eval_split: str = "val", log=None) -> dict:
    """Train one configuration variant and score it on ``eval_split``."""
    cfg = RunConfig(**{**vars(base), **overrides})
    cfg.seed = seed
    cfg.out_dir = str(Path(base.out_dir) / f"{'_'.join(map(str, overrides.values()))}_s{seed}")
    result = train(cfg, dataset, log=log)
    prep = prepare_split(dataset.split(eval_split), dataset.vocab, cfg.patch,
                         cfg.max_decode_len)
    outcome = evaluate_split(result.model, prep, dataset.vocab, cfg.max_decode_len)
    d = outcome.report.to_dict()
    d["exact_match"] = outcome.exact_match
    return d


def run_ablation(matrix: str, base: RunConfig, dataset: ToyDataset,
                 seeds: list[int], log=None) -> list[dict]:
    """Median metrics over seeds for every variant row of the named matrix."""
    if matrix not in ABLATION_MATRICES:
        raise ValueError(f"unknown ablation matrix '{matrix}'")
    rows = []
    for label, overrides in ABLATION_MATRICES[matrix]:
        per_seed = []
        for seed in seeds:
            if log is not None:
                log(f"[{matrix}] {label} seed={seed}")
            per_seed.append(run_variant(base, dataset, overrides, seed, log=log))
        median = {k: statistics.median(r[k] for r in per_seed) for k in per_seed[0]}
        median["variant"] = label
        rows.append(median)
    return rows


def ablation_markdown(matrix: str, rows: list[dict]) -> str:
    cols = ["bleu4", "meteor_simplified", "rouge_l", "cider_d", "s_star_m",
            "exact_match"]
    head = "| variant | " + " | ".join(cols) + " |"
    sep = "|" + "---|" * (len(cols) + 1)
    lines = [f"### {matrix} (median over seeds)", head, sep]
    for r in rows:
        cells = " | ".join(f"{r[c]:.2f}" for c in cols)
        lines.append(f"| {r['variant']} | {cells} |")
    return "\n".join(lines) + "\n"
