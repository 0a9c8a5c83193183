"""Config parsing, decoding, checkpoints, and the training loop."""

import dataclasses

import numpy as np
import pytest

from pastfuture.checkpoint import (Checkpoint, load_checkpoint,
                                   save_checkpoint)
from pastfuture.data import (EOS_ID, PAD_ID, ParallelCorpus,
                             SyntheticTaskSpec, Vocabulary, generate,
                             make_batches)
from pastfuture.decoding import greedy_decode, translate_corpus
from pastfuture.errors import ConfigError, IntegrityError, NumericalAbort
from pastfuture.optim import Adam
from pastfuture.rng import stream
from pastfuture.training import (TrainConfig, assemble_checkpoint,
                                 build_models, model_for_direction,
                                 models_from_checkpoint, restore_optimizers,
                                 train)

TINY = dict(d_model=16, d_ff=32, max_len=12, capsule_dim=4, batch_size=8,
            warmup_steps=10, dev_limit=6, dropout=0.1)


def tiny_corpus(size=120, seed=1, task="copy", vocab=8):
    return generate(SyntheticTaskSpec(task=task, vocab_size=vocab,
                                      min_len=3, max_len=6, size=size,
                                      seed=seed))


class TestTrainConfig:
    def test_file_parsing_with_comments(self, tmp_path):
        text = """
        # full line comment
        mode = dual          # trailing comment
        seed=9
        dropout = 0.05
        stop_gradient_teacher = true
        data = /somewhere/corpus
        """
        path = tmp_path / "c.cfg"
        path.write_text(text)
        cfg = TrainConfig.from_file(path)
        assert cfg.mode == "dual"
        assert cfg.seed == 9
        assert cfg.dropout == 0.05
        assert cfg.stop_gradient_teacher is True
        assert cfg.data == "/somewhere/corpus"

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("learning_rate = 3e-4\n")
        with pytest.raises(ConfigError, match="learning_rate"):
            TrainConfig.from_file(path)

    def test_bad_value_names_key_and_line(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("seed = 1\nbatch_size = many\n")
        with pytest.raises(ConfigError, match="batch_size"):
            TrainConfig.from_file(path)

    def test_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("seed = 1\nseed = 2\n")
        with pytest.raises(ConfigError, match="duplicate"):
            TrainConfig.from_file(path)

    def test_missing_equals_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("just some words\n")
        with pytest.raises(ConfigError, match="key=value"):
            TrainConfig.from_file(path)

    def test_baseline_forces_lambdas_to_zero(self):
        cfg = TrainConfig(mode="baseline", lambda_past=0.7,
                          lambda_future=0.3)
        dcfg = cfg.dual_config()
        assert dcfg.lambda_past == 0.0 and dcfg.lambda_future == 0.0
        assert not dcfg.active
        # the stored weights survive a mode override
        import dataclasses
        as_dual = dataclasses.replace(cfg, mode="dual").dual_config()
        assert as_dual.lambda_past == 0.7 and as_dual.active

    def test_invalid_fields_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode="sideways")
        with pytest.raises(ConfigError):
            TrainConfig(dtype="f16")
        with pytest.raises(ConfigError):
            TrainConfig(train_steps=-1)
        with pytest.raises(ConfigError):
            TrainConfig(eval_interval=0)

    def test_dict_roundtrip_rejects_unknown(self):
        cfg = TrainConfig(mode="dual", seed=4)
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back == cfg
        with pytest.raises(ConfigError, match="mystery"):
            TrainConfig.from_dict({**cfg.to_dict(), "mystery": 1})

    def test_total_steps_counts_pretrain_only_in_pretrain_mode(self):
        assert TrainConfig(mode="dual", train_steps=10,
                           pretrain_steps=5).total_steps == 10
        assert TrainConfig(mode="dual-pretrain", train_steps=10,
                           pretrain_steps=5).total_steps == 15


def small_model(seed=0, vocab_tokens=("a", "b", "c", "d")):
    cfg = TrainConfig(mode="baseline", **TINY)
    v = Vocabulary(list(vocab_tokens))
    model = build_models(cfg, len(v), len(v))["fwd"]
    return model, v


class TestGreedyDecode:
    def test_identical_sources_identical_outputs(self):
        model, v = small_model()
        ids = np.array([[4, 5, 6, EOS_ID], [4, 5, 6, EOS_ID]])
        out = greedy_decode(model, ids, max_len=6)
        assert out[0] == out[1]

    def test_max_len_one_emits_at_most_one_token(self):
        model, v = small_model()
        out = greedy_decode(model, np.array([[4, 5, EOS_ID]]), max_len=1)
        assert len(out[0]) <= 1

    def test_batched_matches_single_sentence_decoding(self):
        # padding one sentence to another's length must not change it
        model, v = small_model(seed=3)
        rows = [np.array([4, 5, 6, 7, EOS_ID]),
                np.array([6, 4, EOS_ID]),
                np.array([7, 7, 7, EOS_ID])]
        width = max(len(r) for r in rows)
        batch = np.full((3, width), PAD_ID, dtype=np.int64)
        for k, r in enumerate(rows):
            batch[k, :len(r)] = r
        together = greedy_decode(model, batch, max_len=7)
        for k, r in enumerate(rows):
            alone = greedy_decode(model, r[None, :], max_len=7)[0]
            assert together[k] == alone

    def test_translate_corpus_roundtrips_tokens(self):
        model, v = small_model()
        hyps = translate_corpus(model, v, v, [["a", "b"], ["c"]],
                                batch_size=2, max_len=4)
        assert len(hyps) == 2
        for h in hyps:
            assert all(tok in ("a", "b", "c", "d", "<unk>") for tok in h)


class TestCheckpoint:
    def _trained_pair(self, tmp_path, mode="dual", dtype="f32", steps=3):
        cfg = TrainConfig(mode=mode, seed=5, train_steps=steps,
                          eval_interval=max(steps, 1), dtype=dtype, **TINY)
        ck, _ = train(cfg, tmp_path / "run", tiny_corpus())
        return cfg, ck

    def test_roundtrip_reproduces_forward_bitwise_f32_and_f64(self,
                                                              tmp_path):
        for dtype in ("f32", "f64"):
            cfg, ck = self._trained_pair(tmp_path / dtype, dtype=dtype)
            path = tmp_path / f"{dtype}.bin"
            save_checkpoint(path, ck)
            loaded = load_checkpoint(path)
            _, models, sv, tv = models_from_checkpoint(loaded)
            _, models_mem, _, _ = models_from_checkpoint(ck)
            ids = np.array([[4, 5, 6, EOS_ID]])
            dec = np.array([[1, 4, 5]])
            for side in ("fwd", "bwd"):
                a, _, _, _ = models[side].forward_scores(ids, dec)
                b, _, _, _ = models_mem[side].forward_scores(ids, dec)
                np.testing.assert_array_equal(a.data, b.data)

    def test_payloads_are_four_bytes_per_f32_element(self, tmp_path):
        cfg, ck = self._trained_pair(tmp_path, mode="baseline")
        path = tmp_path / "c.bin"
        save_checkpoint(path, ck)
        raw = path.read_bytes()
        total = sum(4 * int(np.prod(a.shape)) for a in ck.arrays.values()
                    if a.dtype == np.float32)
        total += sum(8 * int(np.prod(a.shape)) for a in ck.arrays.values()
                     if a.dtype == np.float64)
        assert raw.endswith(b"") and len(raw) > total  # header + payload
        loaded = load_checkpoint(path)
        for name, arr in ck.arrays.items():
            np.testing.assert_array_equal(loaded.arrays[name], arr)

    def test_truncated_file_is_refused(self, tmp_path):
        cfg, ck = self._trained_pair(tmp_path, mode="baseline")
        path = tmp_path / "c.bin"
        save_checkpoint(path, ck)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 40])
        with pytest.raises(IntegrityError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic_and_version_are_refused(self, tmp_path):
        cfg, ck = self._trained_pair(tmp_path, mode="baseline")
        path = tmp_path / "c.bin"
        save_checkpoint(path, ck)
        raw = bytearray(path.read_bytes())
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(IntegrityError, match="not a checkpoint"):
            load_checkpoint(bad)
        raw[4] = raw[4] + 1  # little-endian version field
        bad.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError, match="version"):
            load_checkpoint(bad)

    def test_baseline_checkpoint_has_no_reverse_model(self, tmp_path):
        cfg, ck = self._trained_pair(tmp_path, mode="baseline")
        _, models, _, _ = models_from_checkpoint(ck)
        assert set(models) == {"fwd"}
        with pytest.raises(ConfigError, match="mode 'baseline'"):
            model_for_direction(ck, models, "bwd")
        with pytest.raises(ConfigError, match="mode"):
            ck.require_mode("dual")

    def test_optimizer_moments_roundtrip(self, tmp_path):
        cfg, ck = self._trained_pair(tmp_path, mode="baseline", steps=4)
        path = tmp_path / "c.bin"
        save_checkpoint(path, ck)
        loaded = load_checkpoint(path)
        _, models, _, _ = models_from_checkpoint(loaded)
        optims = restore_optimizers(loaded, models)
        assert optims["fwd"].t == 4
        name = "head.W_v"
        np.testing.assert_array_equal(optims["fwd"].m[name],
                                      ck.arrays[f"fwd.m.{name}"])
        assert np.abs(optims["fwd"].v[name]).max() > 0

    def test_missing_tensor_detected(self, tmp_path):
        cfg, ck = self._trained_pair(tmp_path, mode="baseline")
        ck.arrays.pop("fwd.param.head.W_v")
        with pytest.raises(IntegrityError, match="missing tensor"):
            models_from_checkpoint(ck)


class TestTrainingLoop:
    def test_zero_budget_emits_initial_checkpoint_only(self, tmp_path):
        cfg = TrainConfig(mode="dual", seed=2, train_steps=0,
                          eval_interval=5, **TINY)
        ck, reports = train(cfg, tmp_path, tiny_corpus())
        assert ck.step == 0
        assert reports == []
        assert (tmp_path / "checkpoint.bin").exists()
        assert (tmp_path / "metrics.log").read_text() == ""
        loaded = load_checkpoint(tmp_path / "checkpoint.bin")
        assert loaded.step == 0

    def test_metrics_log_byte_identical_across_reruns(self, tmp_path):
        corpus = tiny_corpus()
        logs = []
        for k in range(2):
            cfg = TrainConfig(mode="dual", seed=11, train_steps=4,
                              eval_interval=2, **TINY)
            train(cfg, tmp_path / str(k), corpus)
            logs.append((tmp_path / str(k) / "metrics.log").read_bytes())
        assert logs[0] == logs[1]
        assert logs[0].count(b"\n") == 2

    def test_seed_changes_the_log(self, tmp_path):
        corpus = tiny_corpus()
        logs = []
        for seed in (1, 2):
            cfg = TrainConfig(mode="baseline", seed=seed, train_steps=2,
                              eval_interval=2, **TINY)
            train(cfg, tmp_path / str(seed), corpus)
            logs.append((tmp_path / str(seed) / "metrics.log").read_bytes())
        assert logs[0] != logs[1]

    def test_numerical_abort_keeps_last_checkpoint(self, tmp_path,
                                                   monkeypatch):
        import pastfuture.training as tr
        calls = {"n": 0}
        real = tr.dual_step

        def sabotaged(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] >= 3:
                raise NumericalAbort("non-finite loss component ce_fwd: nan")
            return real(*args, **kwargs)

        monkeypatch.setattr(tr, "dual_step", sabotaged)
        cfg = TrainConfig(mode="dual", seed=2, train_steps=10,
                          eval_interval=2, **TINY)
        with pytest.raises(NumericalAbort, match="ce_fwd"):
            train(cfg, tmp_path, tiny_corpus())
        kept = load_checkpoint(tmp_path / "checkpoint.bin")
        assert kept.step == 2  # the eval right before the poisoned step

    def test_checkpoint_mode_and_config_snapshot(self, tmp_path):
        cfg = TrainConfig(mode="dual-pretrain", seed=3, train_steps=2,
                          pretrain_steps=2, eval_interval=4, **TINY)
        ck, reports = train(cfg, tmp_path, tiny_corpus())
        assert ck.mode == "dual-pretrain"
        assert ck.step == 4
        assert TrainConfig.from_dict(ck.config) == cfg
        assert len(reports) == 1

    def test_baseline_reports_zero_for_absent_components(self, tmp_path):
        cfg = TrainConfig(mode="baseline", seed=6, train_steps=2,
                          eval_interval=2, **TINY)
        _, reports = train(cfg, tmp_path, tiny_corpus())
        rep = reports[-1]
        assert rep.ce_bwd == 0.0 and rep.l_past == 0.0
        assert rep.l_future == 0.0 and rep.bleu_bwd == 0.0
        assert rep.ce_fwd > 0

    def test_missing_corpus_config_is_a_config_error(self, tmp_path):
        cfg = TrainConfig(mode="baseline", train_steps=1, **TINY)
        with pytest.raises(ConfigError, match="data"):
            train(cfg, tmp_path)


@pytest.mark.slow
class TestDualTrend:
    def test_consistency_losses_shrink_on_copy_task(self, tmp_path):
        # run-and-record: both consistency terms halve from the first
        # checkpoint and the past series trends down over >= 5 checkpoints
        corpus = generate(SyntheticTaskSpec(task="copy", vocab_size=8,
                                            min_len=3, max_len=8, size=900,
                                            seed=7))
        cfg = TrainConfig(mode="dual", seed=7, d_model=32, d_ff=64,
                          n_layers=2, capsule_dim=8, max_len=12,
                          batch_size=16, warmup_steps=40, train_steps=300,
                          eval_interval=20, dev_limit=12, dropout=0.1)
        _, reports = train(cfg, tmp_path, corpus)
        assert len(reports) >= 5
        l_past = np.array([r.l_past for r in reports])
        l_future = np.array([r.l_future for r in reports])
        assert np.isfinite(l_past).all() and np.isfinite(l_future).all()
        assert l_past[-1] < 0.5 * l_past[0]
        assert l_future[-1] < 0.5 * l_future[0]
        # eval noise allows local bumps; the fitted slope must be negative
        steps = np.array([r.step for r in reports], dtype=float)
        slope = np.polyfit(steps, l_past, 1)[0]
        assert slope < 0
