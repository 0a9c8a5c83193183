"""BLEU-4 and adequacy-proxy oracles, all hand-computed."""

import math

import numpy as np
import pytest

from pastfuture.errors import ContractError
from pastfuture.metrics import MetricsReport, adequacy_proxy, bleu4


class TestBleu:
    def test_perfect_match_scores_100(self):
        pairs = [["a", "b", "c", "d", "e"], ["x", "y", "z", "w"]]
        np.testing.assert_allclose(bleu4(pairs, pairs), 100.0, atol=1e-9)

    def test_zero_unigram_overlap_scores_0(self):
        assert bleu4([["q", "r"]], [["a", "b"]]) == 0.0

    def test_short_hypothesis_brevity_penalty(self):
        # four matched tokens against five: every precision is 1 after
        # smoothing, so the score is exactly 100 * exp(1 - 5/4)
        hyp = [["a", "b", "c", "d"]]
        ref = [["a", "b", "c", "d", "e"]]
        expected = 100.0 * math.exp(1.0 - 5.0 / 4.0)
        np.testing.assert_allclose(bleu4(hyp, ref), expected, atol=1e-9)
        assert abs(bleu4(hyp, ref) - 77.88) < 0.01

    def test_long_hypothesis_gets_no_brevity_bonus(self):
        hyp = [["a", "b", "c", "d", "e", "f"]]
        ref = [["a", "b", "c", "d"]]
        # precisions: p1=4/6, p2=(3+1)/(5+1), p3=(2+1)/(4+1), p4=(1+1)/(3+1)
        expected = 100.0 * math.exp(
            (math.log(4 / 6) + math.log(4 / 6) + math.log(3 / 5)
             + math.log(2 / 4)) / 4)
        np.testing.assert_allclose(bleu4(hyp, ref), expected, atol=1e-9)

    def test_smoothing_applies_to_higher_orders_only(self):
        # unigrams match, no bigram does: p2..p4 survive via add-1
        hyp = [["a", "c", "b"]]
        ref = [["a", "b", "c"]]
        expected = 100.0 * math.exp(
            (math.log(1.0) + math.log(1 / 3) + math.log(1 / 2)
             + math.log(1 / 1)) / 4)
        np.testing.assert_allclose(bleu4(hyp, ref), expected, atol=1e-9)

    def test_case_folding_default_and_opt_out(self):
        hyp = [["Apple", "Pie"]]
        ref = [["apple", "pie"]]
        assert bleu4(hyp, ref) == 100.0
        assert bleu4(hyp, ref, lowercase=False) == 0.0

    def test_clipping_counts_repeated_tokens_once_per_ref_copy(self):
        hyp = [["the", "the", "the"]]
        ref = [["the", "cat"]]
        # p1 clipped to 1/3; smoothed p2=(0+1)/(2+1), p3=(0+1)/(1+1),
        # p4=(0+1)/(0+1); hypothesis is longer than the reference so BP=1
        expected = 100.0 * math.exp(
            (math.log(1 / 3) + math.log(1 / 3) + math.log(1 / 2)
             + math.log(1 / 1)) / 4)
        np.testing.assert_allclose(bleu4(hyp, ref, lowercase=False),
                                   expected, atol=1e-9)

    def test_permutation_invariant_over_pairs(self):
        rng = np.random.default_rng(0)
        toks = [f"t{i}" for i in range(12)]
        hyps = [[toks[i] for i in rng.integers(0, 12, size=6)]
                for _ in range(20)]
        refs = [[toks[i] for i in rng.integers(0, 12, size=7)]
                for _ in range(20)]
        order = rng.permutation(20)
        a = bleu4(hyps, refs)
        b = bleu4([hyps[i] for i in order], [refs[i] for i in order])
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_accepts_strings(self):
        assert bleu4(["a b c d"], ["a b c d"]) == 100.0

    def test_empty_corpus_raises(self):
        with pytest.raises(ContractError):
            bleu4([], [])

    def test_mismatched_lengths_raise(self):
        with pytest.raises(ContractError):
            bleu4([["a"]], [["a"], ["b"]])


class TestAdequacy:
    def test_identical_pairs_give_zero_rates(self):
        pairs = [["a", "b"], ["c"]]
        assert adequacy_proxy(pairs, pairs) == (0.0, 0.0)

    def test_under_translation_counting(self):
        under, over = adequacy_proxy([["a", "b"]], [["a", "b", "c"]])
        np.testing.assert_allclose(under, 1 / 3)
        assert over == 0.0

    def test_over_translation_counting(self):
        under, over = adequacy_proxy([["a", "a", "b"]], [["a", "b"]])
        assert under == 0.0
        np.testing.assert_allclose(over, 1 / 2)

    def test_micro_average_pools_counts(self):
        # sentence 1: 1 missing of 3; sentence 2: 0 of 1 -> 1/4 overall
        under, over = adequacy_proxy([["a", "b"], ["z"]],
                                     [["a", "b", "c"], ["z"]])
        np.testing.assert_allclose(under, 1 / 4)
        assert over == 0.0

    def test_over_rate_clamped_to_one(self):
        under, over = adequacy_proxy([["a"] * 9], [["a", "b"]])
        assert over == 1.0
        np.testing.assert_allclose(under, 1 / 2)

    def test_zero_iff_multisets_match(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            ref = [f"t{i}" for i in rng.integers(0, 5, size=6)]
            hyp = list(ref)
            rng.shuffle(hyp)
            assert adequacy_proxy([hyp], [ref]) == (0.0, 0.0)
        under, over = adequacy_proxy([["t0", "t1"]], [["t0", "t2"]])
        assert under > 0 and over > 0

    def test_rates_bounded(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            hyp = [f"t{i}" for i in rng.integers(0, 4,
                                                 size=rng.integers(0, 8))]
            ref = [f"t{i}" for i in rng.integers(0, 4,
                                                 size=rng.integers(1, 8))]
            under, over = adequacy_proxy([hyp], [ref])
            assert 0.0 <= under <= 1.0
            assert 0.0 <= over <= 1.0


class TestMetricsReport:
    def _kw(self, **over):
        kw = dict(step=10, ce_fwd=1.5, ce_bwd=1.25, l_past=0.5,
                  l_future=0.25, bleu_fwd=42.0, bleu_bwd=41.0,
                  under_rate=0.125, over_rate=0.0625)
        kw.update(over)
        return kw

    def test_line_roundtrip(self):
        rep = MetricsReport(**self._kw())
        back = MetricsReport.from_line(rep.as_line())
        assert back == rep

    def test_line_format_is_stable(self):
        line = MetricsReport(**self._kw()).as_line()
        assert line == ("step=10 ce_fwd=1.500000 ce_bwd=1.250000 "
                        "l_past=0.500000 l_future=0.250000 "
                        "bleu_fwd=42.000000 bleu_bwd=41.000000 "
                        "under_rate=0.125000 over_rate=0.062500")

    def test_nonfinite_rejected(self):
        with pytest.raises(ContractError):
            MetricsReport(**self._kw(ce_fwd=float("nan")))

    def test_rates_outside_unit_interval_rejected(self):
        with pytest.raises(ContractError):
            MetricsReport(**self._kw(over_rate=1.5))
