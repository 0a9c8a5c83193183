"""Vocabulary, corpora, synthetic tasks, splits, and batching."""

import numpy as np
import pytest

from pastfuture.data import (EOS_ID, PAD_ID, SOS_ID, UNK_ID, ParallelCorpus,
                             SyntheticTaskSpec, Vocabulary, generate,
                             is_dev_pair, make_batches, split_corpus,
                             task_tokens)
from pastfuture.errors import ConfigError, IntegrityError


class TestVocabulary:
    def test_reserved_ids_are_pinned(self):
        assert (PAD_ID, SOS_ID, EOS_ID, UNK_ID) == (0, 1, 2, 3)

    def test_corpus_order_frequency_then_lexicographic(self):
        v = Vocabulary.from_corpus([["b", "a", "b"], ["c", "a", "b"]])
        assert v.tokens == ["b", "a", "c"]

    def test_encode_unknown_becomes_unk(self):
        v = Vocabulary(["x", "y"])
        np.testing.assert_array_equal(v.encode(["y", "zzz", "x"]),
                                      [5, UNK_ID, 4])

    def test_decode_strips_pad_sos_stops_at_eos(self):
        v = Vocabulary(["x", "y"])
        ids = [SOS_ID, 4, PAD_ID, 5, EOS_ID, 4]
        assert v.decode(ids) == ["x", "y"]

    def test_roundtrip_through_file(self, tmp_path):
        v = Vocabulary(["alpha", "beta", "gamma"])
        v.save(tmp_path / "v.txt")
        w = Vocabulary.load(tmp_path / "v.txt")
        assert w.tokens == v.tokens

    def test_reserved_token_rejected(self):
        with pytest.raises(ConfigError):
            Vocabulary(["fine", "<pad>"])


class TestCorpus:
    def test_empty_side_rejected(self):
        with pytest.raises(IntegrityError):
            ParallelCorpus([(["a"], [])])

    def test_save_load_roundtrip(self, tmp_path):
        c = ParallelCorpus([(["a", "b"], ["c"]), (["d"], ["e", "f"])])
        c.save(tmp_path / "corp")
        d = ParallelCorpus.load(tmp_path / "corp")
        assert d.pairs == c.pairs
        assert d.digest() == c.digest()

    def test_line_count_mismatch_detected(self, tmp_path):
        (tmp_path / "x.src").write_text("a\nb\n")
        (tmp_path / "x.tgt").write_text("c\n")
        with pytest.raises(IntegrityError):
            ParallelCorpus.load(tmp_path / "x")


class TestSyntheticTasks:
    def test_copy_pairs_are_identical(self):
        corpus = generate(SyntheticTaskSpec(task="copy", vocab_size=10,
                                            size=50, seed=1))
        for src, tgt in corpus.pairs:
            assert src == tgt

    def test_reverse_pairs_are_reversed(self):
        corpus = generate(SyntheticTaskSpec(task="reverse", vocab_size=10,
                                            size=50, seed=1))
        for src, tgt in corpus.pairs:
            assert tgt == src[::-1]

    def test_mapped_is_a_consistent_nonidentity_bijection(self):
        corpus = generate(SyntheticTaskSpec(task="mapped", vocab_size=12,
                                            size=200, seed=3))
        mapping = {}
        for src, tgt in corpus.pairs:
            for s, t in zip(src, tgt):
                assert mapping.setdefault(s, t) == t
        assert any(s != t for s, t in mapping.items())
        assert len(set(mapping.values())) == len(mapping)

    def test_window_shuffle_moves_tokens_within_full_blocks(self):
        spec = SyntheticTaskSpec(task="mapped", vocab_size=12, min_len=7,
                                 max_len=10, size=300, seed=4, window=3)
        corpus = generate(spec)
        # trailing partial blocks are never shuffled, so they expose the
        # token mapping positionally
        mapping = {}
        for src, tgt in corpus.pairs:
            n = len(src)
            for k in range(n - n % 3, n):
                assert mapping.setdefault(src[k], tgt[k]) == tgt[k]
        assert len(mapping) == 12  # every token observed unshuffled
        moved = 0
        for src, tgt in corpus.pairs:
            n = len(src)
            for start in range(0, n - n % 3, 3):
                want = sorted(mapping[s] for s in src[start:start + 3])
                assert sorted(tgt[start:start + 3]) == want
                moved += [mapping[s] for s in src[start:start + 3]] \
                    != tgt[start:start + 3]
        assert moved > 100  # the block permutation is not the identity

    def test_same_seed_same_corpus(self):
        spec = SyntheticTaskSpec(task="mapped", vocab_size=8, size=30,
                                 seed=9)
        assert generate(spec).digest() == generate(spec).digest()

    def test_lengths_respect_bounds(self):
        corpus = generate(SyntheticTaskSpec(task="copy", vocab_size=6,
                                            min_len=2, max_len=4, size=80,
                                            seed=2))
        lengths = {len(src) for src, _ in corpus.pairs}
        assert lengths <= {2, 3, 4}
        assert len(lengths) > 1

    def test_mapped_needs_two_tokens(self):
        with pytest.raises(ConfigError):
            SyntheticTaskSpec(task="mapped", vocab_size=1)


class TestSplit:
    def test_split_is_stable_and_roughly_ten_percent(self):
        corpus = generate(SyntheticTaskSpec(task="copy", vocab_size=8,
                                            size=2000, seed=5))
        train_a, dev_a = split_corpus(corpus, seed=5)
        train_b, dev_b = split_corpus(corpus, seed=5)
        assert dev_a.pairs == dev_b.pairs
        assert len(train_a) + len(dev_a) == len(corpus)
        assert 0.05 < len(dev_a) / len(corpus) < 0.15

    def test_different_seed_different_membership(self):
        flags_a = [is_dev_pair(1, i) for i in range(500)]
        flags_b = [is_dev_pair(2, i) for i in range(500)]
        assert flags_a != flags_b


class TestBatches:
    def setup_method(self):
        self.corpus = generate(SyntheticTaskSpec(task="copy", vocab_size=10,
                                                 min_len=3, max_len=8,
                                                 size=300, seed=7))
        self.sv = Vocabulary.from_corpus(p[0] for p in self.corpus.pairs)
        self.tv = Vocabulary.from_corpus(p[1] for p in self.corpus.pairs)

    def test_batches_cover_every_pair_once(self):
        batches = make_batches(self.corpus, self.sv, self.tv, 16, seed=0,
                               max_len=16)
        total = sum(b.src_fwd.shape[0] for b in batches)
        assert total == len(self.corpus)

    def test_views_share_arrays(self):
        b = make_batches(self.corpus, self.sv, self.tv, 16, seed=0,
                         max_len=16)[0]
        assert b.src_bwd is b.dec_out_fwd
        assert b.dec_out_bwd is b.src_fwd

    def test_shapes_and_special_tokens(self):
        for b in make_batches(self.corpus, self.sv, self.tv, 16, seed=0,
                              max_len=16)[:3]:
            assert (b.dec_in_fwd[:, 0] == SOS_ID).all()
            assert (b.dec_in_bwd[:, 0] == SOS_ID).all()
            for row, valid in zip(b.src_fwd, b.src_valid_fwd):
                n = int(valid.sum())
                assert row[n - 1] == EOS_ID
                assert (row[n:] == PAD_ID).all()

    def test_epoch_changes_order_not_content(self):
        a = make_batches(self.corpus, self.sv, self.tv, 16, seed=0,
                         epoch=0, max_len=16)
        b = make_batches(self.corpus, self.sv, self.tv, 16, seed=0,
                         epoch=1, max_len=16)

        def signature(batches):
            rows = []
            for batch in batches:
                for row, valid in zip(batch.src_fwd, batch.src_valid_fwd):
                    rows.append(tuple(row[:valid.sum()]))
            return rows

        sig_a, sig_b = signature(a), signature(b)
        assert sig_a != sig_b
        assert sorted(sig_a) == sorted(sig_b)

    def test_overlong_pairs_are_dropped(self):
        batches = make_batches(self.corpus, self.sv, self.tv, 16, seed=0,
                               max_len=5)
        kept = sum(b.src_fwd.shape[0] for b in batches)
        expected = sum(len(src) + 1 <= 5 for src, _ in self.corpus.pairs)
        assert kept == expected

    def test_triangular_bias_helper_matches_kind(self):
        from pastfuture.transformer import MASK_VALUE
        b = make_batches(self.corpus, self.sv, self.tv, 8, seed=0,
                         max_len=16)[0]
        length = b.src_fwd.shape[1]
        past = b.triangular_bias("fwd", "past")
        future = b.triangular_bias("fwd", "future")
        assert past.shape == (length, length)
        hi = np.triu_indices(length, 1)
        lo = np.tril_indices(length)
        assert (past[hi] == MASK_VALUE).all() and (past[lo] == 0).all()
        assert (future[np.triu_indices(length)] == 0).all()
        assert (future[np.tril_indices(length, -1)] == MASK_VALUE).all()
