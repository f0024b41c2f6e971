"""Caption metrics: hand-computed fixtures, oracle cross-checks, published rows."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from changecap.metrics import (EvalReport, bleu, cider_d, evaluate_captions,
                               meteor_simplified, rouge_l, s_star_m, tokenize)

from oracles import cider_d_bruteforce

# Published caption-metric rows (bleu4, meteor, rouge_l, cider_d, reported
# mean); used to validate the four-way averaging formula only. The absolute
# values come from full-scale experiments far outside this repository.
REPORTED_ROWS = [
    (47.41, 34.47, 65.64, 110.57, 64.52),
    (53.15, 36.58, 69.73, 121.22, 70.17),
    (57.46, 36.56, 70.69, 124.42, 72.28),
    (57.79, 37.15, 71.04, 124.32, 72.58),
    (56.68, 36.17, 69.46, 120.39, 70.68),
    (56.38, 37.29, 70.32, 124.44, 72.11),
    (62.77, 39.61, 74.12, 134.12, 77.65),
    (62.11, 38.80, 73.60, 132.62, 76.78),
    (63.54, 38.82, 73.72, 136.44, 78.13),
    (65.24, 39.91, 75.24, 136.56, 79.24),  # best full model
    (64.75, 39.40, 74.38, 135.28, 78.45),  # self-gating baseline
    (65.01, 39.67, 74.90, 135.91, 78.87),  # spatial stage only
    (64.86, 39.44, 74.51, 134.97, 78.45),  # length-concat temporal variant
    (64.78, 39.77, 74.75, 136.16, 78.87),  # 2 layers
    (64.77, 39.79, 74.86, 136.72, 79.04),  # 4 layers
    (63.13, 37.83, 72.61, 127.26, 75.21),  # state-space decoder
    (64.04, 39.36, 74.10, 134.64, 78.04),  # causal-attention decoder
]


class TestTokenize:
    def test_lowercase_split_strip(self):
        assert tokenize("The Road, has CHANGED.") == ["the", "road", "has", "changed"]

    def test_keeps_hyphenated_regions(self):
        assert tokenize("top-left corner!") == ["top-left", "corner"]


class TestBleu:
    def test_identical_pair_is_100(self):
        scores = bleu(["a b c d e"], [["a b c d e"]])
        assert scores == [100.0] * 4

    def test_clipped_unigram_fixture(self):
        # hyp "a a a" vs ref "a b": clipped 1/3, hyp longer so BP = 1
        scores = bleu(["a a a"], [["a b"]])
        assert scores[0] == pytest.approx(33.33, abs=0.01)
        assert scores[1] == 0.0  # no bigram overlap, no smoothing

    def test_corpus_not_mean_of_sentences(self):
        hyps = ["a b c d", "x y"]
        refs = [["a b c d"], ["x y z w"]]
        corpus_b1 = bleu(hyps, refs)[0]
        sent_mean = (bleu([hyps[0]], [refs[0]])[0] + bleu([hyps[1]], [refs[1]])[0]) / 2
        assert corpus_b1 != pytest.approx(sent_mean, abs=1e-6)

    def test_brevity_penalty_applied(self):
        # hypothesis half the reference length: BP = exp(1 - 2) = e^-1
        score = bleu(["a b"], [["a b c d"]])[0]
        assert score == pytest.approx(100.0 * math.exp(-1.0), abs=1e-6)

    def test_closest_reference_length_ties_to_shorter(self):
        # hyp length 3; ref lengths 2 and 4 tie on |len - 3|, shorter wins,
        # so BP = 1; a longer-preference rule would give exp(1 - 4/3)
        score = bleu(["a b c"], [["a b", "a b c d"]])[0]
        assert score == pytest.approx(100.0, abs=1e-9)

    def test_closest_reference_length_rule(self):
        # refs of length 2 and 9; hyp length 3 -> r = 2 -> BP = 1
        score = bleu(["a b c"], [["a b", "x x x x x x x x x"]])[0]
        assert score == pytest.approx(100.0 * (2 / 3), abs=1e-4)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            bleu([], [])
        with pytest.raises(ValueError):
            bleu(["a"], [[]])


class TestRougeL:
    def test_identical_pair_is_100(self):
        assert rouge_l(["a b c"], [["a b c"]]) == pytest.approx(100.0)

    def test_hand_lcs_fixture(self):
        # hyp "a b c" vs ref "a c": LCS 2, P = 2/3, R = 1, beta = 1.2
        # F = (1 + 1.44) * (2/3) / (1 + 1.44 * (2/3)) = 0.829932
        got = rouge_l(["a b c"], [["a c"]])
        assert got == pytest.approx(82.9932, abs=0.01)

    def test_disjoint_vocab_zero(self):
        assert rouge_l(["a b"], [["x y"]]) == 0.0

    def test_max_over_references(self):
        tight = rouge_l(["a b c"], [["a b c", "z z z"]])
        assert tight == pytest.approx(100.0)


class TestMeteorSimplified:
    def test_identical_four_tokens(self):
        # one chunk, penalty 0.5 * (1/4)^3 -> 99.21875
        got = meteor_simplified(["a b c d"], [["a b c d"]])
        assert got == pytest.approx(99.21875, abs=1e-9)
        assert got == pytest.approx(99.22, abs=0.01)

    def test_no_overlap_zero(self):
        assert meteor_simplified(["a b"], [["x y"]]) == 0.0

    def test_scramble_scores_below_ordered(self):
        ordered = meteor_simplified(["a b c d"], [["a b c d"]])
        scrambled = meteor_simplified(["d c b a"], [["a b c d"]])
        assert scrambled < ordered


class TestCiderD:
    def test_single_sample_corpus_rejected(self):
        with pytest.raises(ValueError):
            cider_d(["a b"], [["a b"]])

    def test_self_consensus_is_corpus_maximum(self):
        refs = [["two houses appeared", "two houses were built"],
                ["the road is gone", "one road vanished"]]
        perfect = cider_d([r[0] for r in refs], refs)
        worse = cider_d(["something else entirely", "no overlap here"], refs)
        assert perfect > worse

    def test_matches_bruteforce_oracle(self):
        corpora = [
            (["a b c", "x y"], [["a b c", "a c"], ["x y z", "x"]]),
            (["the house was added", "nothing changed", "two roads"],
             [["the house has been added", "a house appeared"],
              ["nothing changed", "the scene remains the same"],
              [" two roads were built", "roads roads roads"]]),
            (["q", "q q", "r s t u v", "same same", "different words here"],
             [["q"], ["q q"], ["r s t u v w"], ["same same same"],
              ["different words there"]]),
        ]
        for hyps, refs in corpora:
            got = cider_d(hyps, refs)
            want = cider_d_bruteforce(hyps, refs)
            assert got == pytest.approx(want, abs=1e-9)

    def test_range_and_scale(self):
        refs = [["a b c d"], ["a b c d"]]
        top = cider_d(["a b c d", "a b c d"], refs)
        assert 0.0 <= top <= 1000.0


class TestSStarM:
    def test_all_published_rows_within_half_cent(self):
        assert len(REPORTED_ROWS) == 17
        for b4, meteor, rouge, cider, reported in REPORTED_ROWS:
            got = s_star_m(b4, meteor, rouge, cider)
            assert abs(got - reported) <= 0.005 + 1e-9, (reported, got)

    def test_named_examples(self):
        assert s_star_m(65.24, 39.91, 75.24, 136.56) == pytest.approx(79.24, abs=0.005)
        assert s_star_m(63.13, 37.83, 72.61, 127.26) == pytest.approx(75.21, abs=0.005)

    def test_zeros(self):
        assert s_star_m(0, 0, 0, 0) == 0.0


@settings(max_examples=20, deadline=None)
@given(perm_seed=st.integers(0, 1000))
def test_corpus_permutation_invariance(perm_seed):
    hyps = ["a b c", "d e", "a a b", "f g h i"]
    refs = [["a b c"], ["d e f"], ["a b b"], ["f g h"]]
    rng = np.random.default_rng(perm_seed)
    perm = rng.permutation(len(hyps))
    h2 = [hyps[i] for i in perm]
    r2 = [refs[i] for i in perm]
    assert bleu(h2, r2) == pytest.approx(bleu(hyps, refs), abs=1e-12)
    assert rouge_l(h2, r2) == pytest.approx(rouge_l(hyps, refs), abs=1e-12)
    assert meteor_simplified(h2, r2) == pytest.approx(meteor_simplified(hyps, refs), abs=1e-12)
    assert cider_d(h2, r2) == pytest.approx(cider_d(hyps, refs), abs=1e-12)


class TestEvalReport:
    def test_report_fields_and_serialization(self):
        hyps = ["a b c", "d e"]
        refs = [["a b c"], ["d e"]]
        rep = evaluate_captions(hyps, refs)
        assert rep.bleu[0] == 100.0
        assert rep.rouge_l == 100.0
        d = rep.to_dict()
        assert set(d) == set(EvalReport.CSV_HEADER.split(","))
        assert rep.s_star_m == pytest.approx(
            s_star_m(d["bleu4"], d["meteor_simplified"], d["rouge_l"], d["cider_d"]))
        row = rep.csv_row()
        assert len(row.split(",")) == 8
