"""Pre-norm transformer encoder/decoder over the autodiff engine.

Attention direction is controlled through additive bias matrices whose
entries are 0 (attend) or -1e9 (blocked). A "past" bias keeps key j for
query i iff j <= i; a "future" bias iff j >= i. Feeding a full sequence
through the encoder under one of these biases yields, in a single pass,
the same rows a per-prefix (or per-suffix) re-encode would produce, which
is how the teacher summaries are computed cheaply.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PAD_ID, SOS_ID
from .errors import ConfigError, ContractError
from .params import ParamStore, xavier_uniform

MASK_VALUE = -1e9
BIAS_KINDS = ("past", "future")


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 128
    dropout: float = 0.1
    max_len: int = 64

    def __post_init__(self):
        if self.src_vocab < 5 or self.tgt_vocab < 5:
            raise ConfigError("vocab sizes must cover the 4 reserved ids "
                              "plus at least one real token")
        for name in ("d_model", "n_heads", "n_layers", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by "
                f"n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class EncoderOutput:
    """Hidden states [B, L, D] plus the non-pad key mask [B, L]."""

    h: Tensor
    valid: np.ndarray


def make_triangular_bias(length: int, kind: str) -> np.ndarray:
    """Additive [length, length] bias keeping j<=i (past) or j>=i (future)."""
    if kind not in BIAS_KINDS:
        raise ConfigError(f"bias kind must be one of {BIAS_KINDS}, "
                          f"got {kind!r}")
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    keep = j <= i if kind == "past" else j >= i
    return np.where(keep, 0.0, MASK_VALUE)


def pad_key_bias(ids: np.ndarray) -> np.ndarray:
    """[B, 1, 1, L] bias blocking attention into pad positions."""
    blocked = np.where(ids == PAD_ID, MASK_VALUE, 0.0)
    return blocked[:, None, None, :]


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    """Interleaved sinusoids: even dims sine, odd dims cosine."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, dim / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor,
                         bias: np.ndarray | None, params: ParamStore,
                         prefix: str, n_heads: int) -> Tensor:
    """Projected scaled-dot attention; bias broadcasts over heads.

    q [B, Lq, D], k/v [B, Lk, D]; bias may be [Lq, Lk], [B, Lq, Lk] or
    [B, 1, Lq, Lk].
    """
    b_sz, lq, d = q.shape
    lk = k.shape[1]
    if d % n_heads:
        raise ConfigError(f"d_model {d} not divisible by heads {n_heads}")
    dh = d // n_heads

    def heads(x: Tensor, name: str, length: int) -> Tensor:
        proj = x @ params[prefix + name + ".w"] + params[prefix + name + ".b"]
        split = ad.reshape(proj, (b_sz, length, n_heads, dh))
        return ad.transpose(split, (0, 2, 1, 3))

    qh = heads(q, "wq", lq)
    kh = heads(k, "wk", lk)
    vh = heads(v, "wv", lk)
    logits = (qh @ ad.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(dh))
    if bias is not None:
        bias = np.asarray(bias, dtype=q.data.dtype)
        if bias.ndim == 2:
            bias = bias[None, None]
        elif bias.ndim == 3:
            bias = bias[:, None]
        logits = logits + Tensor(bias)
    probs = ad.softmax(logits, axis=-1)
    ctx = ad.transpose(probs @ vh, (0, 2, 1, 3))
    merged = ad.reshape(ctx, (b_sz, lq, d))
    return merged @ params[prefix + "wo.w"] + params[prefix + "wo.b"]


class Transformer:
    """Encoder/decoder stack; parameters live in the caller's ParamStore."""

    def __init__(self, cfg: ModelConfig, store: ParamStore,
                 rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        self.p = store
        self.dtype = dtype
        self.pe = positional_encoding(cfg.max_len, cfg.d_model).astype(dtype)
        self._build(rng)

    # -- parameter layout ---------------------------------------------------

    def _mat(self, name: str, shape: tuple, rng) -> None:
        self.p.add(name, Tensor(xavier_uniform(rng, shape, self.dtype)))

    def _zeros(self, name: str, shape: tuple) -> None:
        self.p.add(name, Tensor(np.zeros(shape, dtype=self.dtype)))

    def _ones(self, name: str, shape: tuple) -> None:
        self.p.add(name, Tensor(np.ones(shape, dtype=self.dtype)))

    def _attn_block(self, prefix: str, rng) -> None:
        d = self.cfg.d_model
        for name in ("wq", "wk", "wv", "wo"):
            self._mat(f"{prefix}{name}.w", (d, d), rng)
            self._zeros(f"{prefix}{name}.b", (d,))

    def _ln_block(self, prefix: str) -> None:
        d = self.cfg.d_model
        self._ones(prefix + ".g", (d,))
        self._zeros(prefix + ".b", (d,))

    def _ffn_block(self, prefix: str, rng) -> None:
        d, f = self.cfg.d_model, self.cfg.d_ff
        self._mat(prefix + "w1.w", (d, f), rng)
        self._zeros(prefix + "w1.b", (f,))
        self._mat(prefix + "w2.w", (f, d), rng)
        self._zeros(prefix + "w2.b", (d,))

    def _build(self, rng) -> None:
        cfg = self.cfg
        self._mat("embed.src", (cfg.src_vocab, cfg.d_model), rng)
        self._mat("embed.tgt", (cfg.tgt_vocab, cfg.d_model), rng)
        for i in range(cfg.n_layers):
            base = f"enc.{i}."
            self._ln_block(base + "ln1")
            self._attn_block(base + "attn.", rng)
            self._ln_block(base + "ln2")
            self._ffn_block(base + "ffn.", rng)
        self._ln_block("enc.final_ln")
        for i in range(cfg.n_layers):
            base = f"dec.{i}."
            self._ln_block(base + "ln1")
            self._attn_block(base + "self_attn.", rng)
            self._ln_block(base + "ln2")
            self._attn_block(base + "cross_attn.", rng)
            self._ln_block(base + "ln3")
            self._ffn_block(base + "ffn.", rng)
        self._ln_block("dec.final_ln")

    # -- forward pieces -----------------------------------------------------

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.p[prefix + ".g"], self.p[prefix + ".b"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        h = ad.relu(x @ self.p[prefix + "w1.w"] + self.p[prefix + "w1.b"])
        return h @ self.p[prefix + "w2.w"] + self.p[prefix + "w2.b"]

    def _drop(self, x: Tensor, train: bool, rng) -> Tensor:
        if not train or self.cfg.dropout == 0.0:
            return x
        return ad.dropout(x, self.cfg.dropout, rng)

    def embed(self, ids: np.ndarray, side: str, train: bool = False,
              rng=None) -> Tensor:
        """Token embedding scaled by sqrt(d_model), plus positions."""
        if side not in ("src", "tgt"):
            raise ContractError(f"embed side must be src or tgt, got {side!r}")
        length = ids.shape[-1]
        if length > self.cfg.max_len:
            raise ContractError(
                f"sequence length {length} exceeds max_len {self.cfg.max_len}")
        scale = np.sqrt(self.cfg.d_model)
        x = ad.gather_rows(self.p["embed." + side], ids) * scale
        x = x + Tensor(self.pe[:length])
        return self._drop(x, train, rng)

    def encode(self, ids: np.ndarray, bias: np.ndarray | None = None,
               train: bool = False, rng=None) -> EncoderOutput:
        """Encode [B, I] ids; bias, if given, is an [I, I] direction bias."""
        ids = np.atleast_2d(ids)
        full = pad_key_bias(ids)
        if bias is not None:
            full = np.minimum(full, np.asarray(bias)[None, None])
        x = self.embed(ids, "src", train, rng)
        for i in range(self.cfg.n_layers):
            base = f"enc.{i}."
            h = self._ln(base + "ln1", x)
            x = x + self._drop(
                multi_head_attention(h, h, h, full, self.p, base + "attn.",
                                     self.cfg.n_heads), train, rng)
            h = self._ln(base + "ln2", x)
            x = x + self._drop(self._ffn(base + "ffn.", h), train, rng)
        x = self._ln("enc.final_ln", x)
        return EncoderOutput(h=x, valid=ids != PAD_ID)

    def decode_all(self, prefix_ids: np.ndarray, enc: EncoderOutput,
                   train: bool = False, rng=None) -> Tensor:
        """Hidden state for every decode step; causal over the prefix.

        prefix_ids [B, T] must start with SOS in every row. Row t of the
        result conditions on prefix positions <= t and on the source.
        """
        prefix_ids = np.atleast_2d(prefix_ids)
        if (prefix_ids[:, 0] != SOS_ID).any():
            raise ContractError("decoder prefix must start with SOS")
        t_len = prefix_ids.shape[1]
        self_bias = np.minimum(
            pad_key_bias(prefix_ids),
            make_triangular_bias(t_len, "past")[None, None])
        cross_bias = np.where(enc.valid, 0.0, MASK_VALUE)[:, None, None, :]
        x = self.embed(prefix_ids, "tgt", train, rng)
        for i in range(self.cfg.n_layers):
            base = f"dec.{i}."
            h = self._ln(base + "ln1", x)
            x = x + self._drop(
                multi_head_attention(h, h, h, self_bias, self.p,
                                     base + "self_attn.", self.cfg.n_heads),
                train, rng)
            h = self._ln(base + "ln2", x)
            x = x + self._drop(
                multi_head_attention(h, enc.h, enc.h, cross_bias, self.p,
                                     base + "cross_attn.", self.cfg.n_heads),
                train, rng)
            h = self._ln(base + "ln3", x)
            x = x + self._drop(self._ffn(base + "ffn.", h), train, rng)
        return self._ln("dec.final_ln", x)

    def decode_step(self, prefix_ids: np.ndarray,
                    enc: EncoderOutput) -> Tensor:
        """State of the newest step only: decode_all's last row [B, D]."""
        return self.decode_all(prefix_ids, enc)[:, -1]
