"""Training loop, configuration surface, and checkpoint assembly.

Determinism contract: a given config + seed reproduces the metrics log
byte for byte. Everything stochastic draws from named streams derived
from the config seed: model init, batch order, dropout, step
subsampling. Evaluation decodes greedily, which is deterministic.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .capsules import CapsuleConfig
from .checkpoint import Checkpoint, save_checkpoint
from .data import (ParallelCorpus, Vocabulary, make_batches, split_corpus)
from .decoding import translate_corpus
from .dual import DualLossConfig, dual_losses, dual_step
from .errors import ConfigError, IntegrityError, NumericalAbort
from .metrics import MetricsReport, adequacy_proxy, bleu4
from .model import DirectionModel
from .optim import Adam, inverse_sqrt_lr
from .rng import state_of, stream
from .transformer import ModelConfig

MODES = ("baseline", "dual", "dual-pretrain")
_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class TrainConfig:
    """Flat training configuration; every field is one config-file key."""

    data: str = ""
    mode: str = "baseline"
    seed: int = 0
    dtype: str = "f32"

    # transformer
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 128
    dropout: float = 0.1
    max_len: int = 64

    # capsules
    n_past: int = 2
    n_future: int = 2
    n_redundant: int = 1
    capsule_dim: int = 32
    n_iterations: int = 3

    # dual supervision
    lambda_past: float = 0.5
    lambda_future: float = 0.5
    stop_gradient_teacher: bool = False
    step_subsample: float = 1.0

    # optimization
    label_smoothing: float = 0.0
    batch_size: int = 32
    warmup_steps: int = 400
    lr_scale: float = 1.0
    train_steps: int = 2000
    pretrain_steps: int = 0

    # evaluation
    eval_interval: int = 400
    dev_limit: int = 128
    bleu_target: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, "
                              f"got {self.mode!r}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.train_steps < 0 or self.pretrain_steps < 0:
            raise ConfigError("step budgets must be >= 0")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dev_limit < 0:
            raise ConfigError("dev_limit must be >= 0 (0 = whole dev set)")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    @property
    def total_steps(self) -> int:
        pre = self.pretrain_steps if self.mode == "dual-pretrain" else 0
        return pre + self.train_steps

    def model_config(self, n_src: int, n_tgt: int) -> ModelConfig:
        return ModelConfig(src_vocab=n_src, tgt_vocab=n_tgt,
                           d_model=self.d_model, n_heads=self.n_heads,
                           n_layers=self.n_layers, d_ff=self.d_ff,
                           dropout=self.dropout, max_len=self.max_len)

    def capsule_config(self) -> CapsuleConfig:
        return CapsuleConfig(n_past=self.n_past, n_future=self.n_future,
                             n_redundant=self.n_redundant,
                             capsule_dim=self.capsule_dim,
                             n_iterations=self.n_iterations)

    def dual_config(self) -> DualLossConfig:
        # baseline runs a single model: consistency weights are forced off
        # here, where they are consumed, so a --mode override can restore
        # the configured weights without reparsing
        lp = 0.0 if self.mode == "baseline" else self.lambda_past
        lf = 0.0 if self.mode == "baseline" else self.lambda_future
        return DualLossConfig(lambda_past=lp, lambda_future=lf,
                              stop_gradient_teacher=self.stop_gradient_teacher,
                              step_subsample=self.step_subsample)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, kv: dict) -> "TrainConfig":
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = sorted(set(kv) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**kv)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Flat key=value lines; # starts a comment; unknown keys error."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kv: dict = {}
        with open(path, encoding="utf-8") as fh:
            for ln, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected key=value, "
                                      f"got {raw.strip()!r}")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in fields:
                    raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
                if key in kv:
                    raise ConfigError(f"{path}:{ln}: duplicate key {key!r}")
                kv[key] = _coerce(key, value, fields[key].type, path, ln)
        return cls(**kv)


def _coerce(key: str, value: str, ftype, path, ln):
    try:
        if ftype in ("bool", bool):
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if ftype in ("int", int):
            return int(value)
        if ftype in ("float", float):
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"{path}:{ln}: bad value for {key!r}: "
                          f"{exc}") from exc


# -- model/checkpoint assembly -----------------------------------------------


def build_models(cfg: TrainConfig, n_src: int,
                 n_tgt: int) -> dict[str, DirectionModel]:
    """The forward model always exists; dual modes add the reverse one."""
    ccfg = cfg.capsule_config()
    models = {"fwd": DirectionModel(cfg.model_config(n_src, n_tgt), ccfg,
                                    stream(cfg.seed, "model/fwd"),
                                    cfg.np_dtype)}
    if cfg.mode != "baseline":
        models["bwd"] = DirectionModel(cfg.model_config(n_tgt, n_src), ccfg,
                                       stream(cfg.seed, "model/bwd"),
                                       cfg.np_dtype)
    return models


def assemble_checkpoint(cfg: TrainConfig, step: int,
                        models: dict[str, DirectionModel],
                        optims: dict[str, Adam],
                        src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                        rng_state: dict | None = None) -> Checkpoint:
    arrays: dict[str, np.ndarray] = {}
    for side, model in models.items():
        for name, p in model.params.items():
            arrays[f"{side}.param.{name}"] = p.data
        opt = optims.get(side)
        if opt is not None:
            for name in opt.m:
                arrays[f"{side}.m.{name}"] = opt.m[name]
                arrays[f"{side}.v.{name}"] = opt.v[name]
            arrays[f"{side}.adam_t"] = np.array([opt.t], dtype=np.float64)
    return Checkpoint(config=cfg.to_dict(), mode=cfg.mode, step=step,
                      src_tokens=src_vocab.tokens,
                      tgt_tokens=tgt_vocab.tokens,
                      arrays=arrays, rng_state=rng_state)


def models_from_checkpoint(ck: Checkpoint):
    """Rebuild (cfg, models, src_vocab, tgt_vocab) with saved weights."""
    cfg = TrainConfig.from_dict(ck.config)
    src_vocab = Vocabulary(ck.src_tokens)
    tgt_vocab = Vocabulary(ck.tgt_tokens)
    models = build_models(cfg, len(src_vocab), len(tgt_vocab))
    for side, model in models.items():
        for name, p in model.params.items():
            key = f"{side}.param.{name}"
            if key not in ck.arrays:
                raise IntegrityError(f"checkpoint is missing tensor {key!r}")
            arr = ck.arrays[key]
            if arr.shape != p.data.shape:
                raise IntegrityError(
                    f"{key!r}: shape {arr.shape} != {p.data.shape}")
            p.data[...] = arr
    return cfg, models, src_vocab, tgt_vocab


def restore_optimizers(ck: Checkpoint,
                       models: dict[str, DirectionModel]) -> dict[str, Adam]:
    optims = {}
    for side, model in models.items():
        opt = Adam(model.params)
        t_key = f"{side}.adam_t"
        if t_key in ck.arrays:
            opt.t = int(ck.arrays[t_key][0])
            for name in opt.m:
                opt.m[name][...] = ck.arrays[f"{side}.m.{name}"]
                opt.v[name][...] = ck.arrays[f"{side}.v.{name}"]
        optims[side] = opt
    return optims


def model_for_direction(ck: Checkpoint, models: dict[str, DirectionModel],
                        direction: str) -> DirectionModel:
    if direction not in ("fwd", "bwd"):
        raise ConfigError(f"direction must be fwd or bwd, got {direction!r}")
    if direction not in models:
        raise ConfigError(f"checkpoint was trained in mode {ck.mode!r} and "
                          f"has no {direction!r} model")
    return models[direction]


# -- evaluation ---------------------------------------------------------------


def _probe_losses(models, probe, dcfg, label_smoothing):
    if "bwd" not in models:
        logits, _, _, _ = models["fwd"].forward_scores(
            probe.src_fwd, probe.dec_in_fwd)
        ce = models["fwd"].cross_entropy(logits, probe.dec_out_fwd,
                                         label_smoothing)
        return float(ce.item()), 0.0, 0.0, 0.0
    eval_dcfg = dataclasses.replace(dcfg, step_subsample=1.0)
    if not eval_dcfg.active:
        # probe the consistency terms even when training runs with zero
        # weights, so the log shows what the teacher distances are doing
        eval_dcfg = dataclasses.replace(eval_dcfg, lambda_past=0.5,
                                        lambda_future=0.5)
    losses = dual_losses(probe, models["fwd"], models["bwd"], eval_dcfg,
                         label_smoothing=label_smoothing)
    return (float(losses["ce_fwd"].item()), float(losses["ce_bwd"].item()),
            float(losses["l_past"].item()), float(losses["l_future"].item()))


def evaluate(models, src_vocab, tgt_vocab, dev: ParallelCorpus,
             cfg: TrainConfig, step: int, probe) -> MetricsReport:
    """Loss components on a fixed dev probe batch plus decode metrics."""
    ce_f, ce_b, l_p, l_f = _probe_losses(models, probe, cfg.dual_config(),
                                         cfg.label_smoothing)
    limit = cfg.dev_limit or len(dev)
    srcs = [p[0] for p in dev.pairs[:limit]]
    refs = [p[1] for p in dev.pairs[:limit]]
    hyps = translate_corpus(models["fwd"], src_vocab, tgt_vocab, srcs,
                            batch_size=cfg.batch_size)
    bleu_f = bleu4(hyps, refs)
    under, over = adequacy_proxy(hyps, refs)
    bleu_b = 0.0
    if "bwd" in models:
        hyps_b = translate_corpus(models["bwd"], tgt_vocab, src_vocab, refs,
                                  batch_size=cfg.batch_size)
        bleu_b = bleu4(hyps_b, srcs)
    return MetricsReport(step=step, ce_fwd=ce_f, ce_bwd=ce_b, l_past=l_p,
                         l_future=l_f, bleu_fwd=bleu_f, bleu_bwd=bleu_b,
                         under_rate=under, over_rate=over)


# -- the loop -----------------------------------------------------------------


def _baseline_step(batch, model, label_smoothing, rng):
    with ad.Tape():
        logits, _, _, _ = model.forward_scores(batch.src_fwd,
                                               batch.dec_in_fwd,
                                               train=True, rng=rng)
        ce = model.cross_entropy(logits, batch.dec_out_fwd, label_smoothing)
        value = float(ce.item())
        if not np.isfinite(value):
            raise NumericalAbort(f"non-finite loss component ce_fwd: {value}")
        ad.backward(ce)
    return value


def train(cfg: TrainConfig, out_dir,
          corpus: ParallelCorpus | None = None
          ) -> tuple[Checkpoint, list[MetricsReport]]:
    """Run the configured schedule; returns the final checkpoint and the
    metrics series. Writes out_dir/checkpoint.bin at every eval (so a
    numerical abort keeps the last good state) and appends one line per
    eval to out_dir/metrics.log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if corpus is None:
        if not cfg.data:
            raise ConfigError("config has no data= corpus prefix")
        corpus = ParallelCorpus.load(cfg.data)
    train_c, dev_c = split_corpus(corpus, cfg.seed)
    src_vocab = Vocabulary.from_corpus(p[0] for p in corpus.pairs)
    tgt_vocab = Vocabulary.from_corpus(p[1] for p in corpus.pairs)

    models = build_models(cfg, len(src_vocab), len(tgt_vocab))
    optims = {side: Adam(m.params) for side, m in models.items()}
    drop_rng = stream(cfg.seed, "train/dropout")
    sub_rng = stream(cfg.seed, "train/subsample")
    dcfg = cfg.dual_config()
    pre_dcfg = dataclasses.replace(dcfg, lambda_past=0.0, lambda_future=0.0)
    probe = make_batches(dev_c, src_vocab, tgt_vocab, cfg.batch_size,
                         cfg.seed, epoch=0, max_len=cfg.max_len)[0]

    def snapshot(step):
        state = {"dropout": state_of(drop_rng),
                 "subsample": state_of(sub_rng)}
        ck = assemble_checkpoint(cfg, step, models, optims, src_vocab,
                                 tgt_vocab, state)
        save_checkpoint(out / "checkpoint.bin", ck)
        return ck

    ck = snapshot(0)
    reports: list[MetricsReport] = []
    total = cfg.total_steps
    pretrain_until = (cfg.pretrain_steps if cfg.mode == "dual-pretrain"
                      else 0)
    step = 0
    epoch = 0
    done = False
    with open(out / "metrics.log", "w", encoding="utf-8") as logf:
        while step < total and not done:
            for batch in make_batches(train_c, src_vocab, tgt_vocab,
                                      cfg.batch_size, cfg.seed, epoch,
                                      cfg.max_len):
                step += 1
                lr = inverse_sqrt_lr(step, cfg.d_model, cfg.warmup_steps,
                                     cfg.lr_scale)
                for model in models.values():
                    model.params.zero_grads()
                if cfg.mode == "baseline":
                    _baseline_step(batch, models["fwd"],
                                   cfg.label_smoothing, drop_rng)
                else:
                    active = pre_dcfg if step <= pretrain_until else dcfg
                    dual_step(batch, models["fwd"], models["bwd"], active,
                              train=True, rng=drop_rng, sub_rng=sub_rng,
                              label_smoothing=cfg.label_smoothing)
                for opt in optims.values():
                    opt.step(lr)

                if step % cfg.eval_interval == 0 or step == total:
                    report = evaluate(models, src_vocab, tgt_vocab, dev_c,
                                      cfg, step, probe)
                    reports.append(report)
                    logf.write(report.as_line() + "\n")
                    logf.flush()
                    ck = snapshot(step)
                    if (cfg.bleu_target > 0
                            and report.bleu_fwd >= cfg.bleu_target):
                        done = True
                if step >= total or done:
                    break
            epoch += 1
    if ck.step != step:
        ck = snapshot(step)
    return ck, reports
