"""Caption evaluation: BLEU-N, ROUGE_L, CIDEr-D, simplified METEOR, and their mean.

All scores are reported on the conventional percent scale (x100). METEOR is a
documented simplification: exact unigram matching only, no stemming or synonym
resources, hence the field name ``meteor_simplified``. BLEU is corpus-level
with no smoothing, so a zero n-gram overlap zeroes that order.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass

_PUNCT = ".,!?;:"


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip terminal punctuation per token."""
    out = []
    for tok in text.lower().split():
        tok = tok.rstrip(_PUNCT)
        if tok:
            out.append(tok)
    return out


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _as_token_corpus(hyps, refs_per_hyp):
    if not hyps:
        raise ValueError("empty hypothesis list")
    if len(hyps) != len(refs_per_hyp):
        raise ValueError("each hypothesis needs its own reference list")
    if any(len(refs) == 0 for refs in refs_per_hyp):
        raise ValueError("every hypothesis needs at least one reference")
    h_tok = [tokenize(h) for h in hyps]
    r_tok = [[tokenize(r) for r in refs] for refs in refs_per_hyp]
    return h_tok, r_tok


# ---- BLEU ------------------------------------------------------------------

def bleu(hyps: list[str], refs_per_hyp: list[list[str]], max_n: int = 4) -> list[float]:
    """Corpus-level clipped n-gram precision, geometric mean, brevity penalty.

    Returns [BLEU-1, ..., BLEU-max_n] in percent. The brevity penalty uses
    the closest reference length per hypothesis (ties go to the shorter).
    """
    h_tok, r_tok = _as_token_corpus(hyps, refs_per_hyp)
    clipped = [0] * max_n
    total = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for h, refs in zip(h_tok, r_tok):
        hyp_len += len(h)
        ref_len += min((abs(len(r) - len(h)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(h, n)
            if not counts:
                continue
            best = Counter()
            for r in refs:
                for g, c in _ngrams(r, n).items():
                    if c > best[g]:
                        best[g] = c
            clipped[n - 1] += sum(min(c, best[g]) for g, c in counts.items())
            total[n - 1] += sum(counts.values())

    if hyp_len == 0:
        return [0.0] * max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    scores = []
    for n in range(1, max_n + 1):
        precisions = [clipped[i] / total[i] if total[i] else 0.0 for i in range(n)]
        if any(p == 0.0 for p in precisions):
            scores.append(0.0)
        else:
            scores.append(100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / n))
    return scores


# ---- ROUGE_L ---------------------------------------------------------------

def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(hyps: list[str], refs_per_hyp: list[list[str]], beta: float = 1.2) -> float:
    """LCS F-measure, recall weighted by beta: F = (1+b^2)PR / (R + b^2 P).

    Takes the max over references per sample and the mean over the corpus.
    """
    h_tok, r_tok = _as_token_corpus(hyps, refs_per_hyp)
    b2 = beta * beta
    scores = []
    for h, refs in zip(h_tok, r_tok):
        best = 0.0
        for r in refs:
            lcs = _lcs_length(h, r)
            if lcs == 0 or not h or not r:
                continue
            prec = lcs / len(h)
            rec = lcs / len(r)
            best = max(best, ((1 + b2) * prec * rec) / (rec + b2 * prec))
        scores.append(best)
    return 100.0 * sum(scores) / len(scores)


# ---- simplified METEOR -----------------------------------------------------

def _meteor_alignment(h: list[str], r: list[str]) -> tuple[int, int]:
    """(matches, chunks) under exact unigram matching.

    Greedy alignment walks the hypothesis left to right, preferring the
    reference position that extends the current chunk, otherwise the first
    unused occurrence. Total matches equal the multiset intersection size.
    """
    unused = defaultdict(list)
    for j, w in enumerate(r):
        unused[w].append(j)
    taken = set()
    matches = 0
    chunks = 0
    prev_j = None
    for w in h:
        slots = [j for j in unused.get(w, ()) if j not in taken]
        if not slots:
            prev_j = None
            continue
        if prev_j is not None and prev_j + 1 in slots:
            j = prev_j + 1
        else:
            j = slots[0]
            chunks += 1
        taken.add(j)
        matches += 1
        prev_j = j
    return matches, chunks


def meteor_simplified(hyps: list[str], refs_per_hyp: list[list[str]]) -> float:
    """Exact-match METEOR: Fmean = 10PR/(R+9P), penalty 0.5*(chunks/matches)^3."""
    h_tok, r_tok = _as_token_corpus(hyps, refs_per_hyp)
    scores = []
    for h, refs in zip(h_tok, r_tok):
        best = 0.0
        for r in refs:
            m, chunks = _meteor_alignment(h, r)
            if m == 0:
                continue
            prec = m / len(h)
            rec = m / len(r)
            fmean = 10.0 * prec * rec / (rec + 9.0 * prec)
            penalty = 0.5 * (chunks / m) ** 3
            best = max(best, fmean * (1.0 - penalty))
        scores.append(best)
    return 100.0 * sum(scores) / len(scores)


# ---- CIDEr-D ---------------------------------------------------------------

def cider_d(hyps: list[str], refs_per_hyp: list[list[str]],
            max_n: int = 4, sigma: float = 6.0) -> float:
    """TF-IDF n-gram cosine consensus with count clipping and length penalty.

    Document frequencies come from the reference corpus itself, so the
    corpus needs at least two samples for the IDF to be defined. The mean
    per-sample score (internally scaled into [0, 10]) is reported x100,
    giving the conventional table scale with range [0, 1000].
    """
    h_tok, r_tok = _as_token_corpus(hyps, refs_per_hyp)
    if len(h_tok) < 2:
        raise ValueError("cider_d needs a corpus of at least 2 samples")

    doc_freq: Counter = Counter()
    for refs in r_tok:
        seen = set()
        for r in refs:
            for n in range(1, max_n + 1):
                seen.update(_ngrams(r, n).keys())
        doc_freq.update(seen)
    log_corpus = math.log(len(h_tok))

    def vectorize(tokens):
        vecs = []
        norms = []
        for n in range(1, max_n + 1):
            vec = {}
            for g, c in _ngrams(tokens, n).items():
                idf = log_corpus - math.log(max(1.0, doc_freq[g]))
                vec[g] = c * idf
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms, len(tokens)

    sample_scores = []
    for h, refs in zip(h_tok, r_tok):
        h_vecs, h_norms, h_len = vectorize(h)
        acc = 0.0
        for r in refs:
            r_vecs, r_norms, r_len = vectorize(r)
            per_n = []
            for n in range(max_n):
                num = 0.0
                for g, hv in h_vecs[n].items():
                    rv = r_vecs[n].get(g)
                    if rv is not None:
                        num += min(hv, rv) * rv  # clip hypothesis counts
                denom = h_norms[n] * r_norms[n]
                val = num / denom if denom > 0 else 0.0
                val *= math.exp(-((h_len - r_len) ** 2) / (2.0 * sigma * sigma))
                per_n.append(val)
            acc += sum(per_n) / max_n
        sample_scores.append(10.0 * acc / len(refs))
    return 100.0 * sum(sample_scores) / len(sample_scores)


# ---- aggregate -------------------------------------------------------------

def s_star_m(bleu4: float, meteor: float, rouge: float, cider: float) -> float:
    """Arithmetic mean of BLEU-4, METEOR, ROUGE_L, and CIDEr-D (table scale)."""
    return (bleu4 + meteor + rouge + cider) / 4.0


@dataclass
class EvalReport:
    bleu: list[float]          # [B1, B2, B3, B4], percent
    rouge_l: float
    meteor_simplified: float
    cider_d: float
    s_star_m: float

    CSV_HEADER = "bleu1,bleu2,bleu3,bleu4,rouge_l,meteor_simplified,cider_d,s_star_m"

    def to_dict(self) -> dict:
        return {
            "bleu1": self.bleu[0], "bleu2": self.bleu[1],
            "bleu3": self.bleu[2], "bleu4": self.bleu[3],
            "rouge_l": self.rouge_l,
            "meteor_simplified": self.meteor_simplified,
            "cider_d": self.cider_d,
            "s_star_m": self.s_star_m,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self) -> str:
        d = self.to_dict()
        return ",".join(f"{d[k]:.4f}" for k in self.CSV_HEADER.split(","))


def evaluate_captions(hyps: list[str], refs_per_hyp: list[list[str]]) -> EvalReport:
    b = bleu(hyps, refs_per_hyp)
    r = rouge_l(hyps, refs_per_hyp)
    m = meteor_simplified(hyps, refs_per_hyp)
    c = cider_d(hyps, refs_per_hyp)
    return EvalReport(bleu=b, rouge_l=r, meteor_simplified=m, cider_d=c,
                      s_star_m=s_star_m(b[3], m, r, c))
