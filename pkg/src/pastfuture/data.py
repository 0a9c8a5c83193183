"""Vocabulary, synthetic transduction tasks, and paired batching.

Every training batch carries two views of the same sentence pairs: the
forward view (source -> target) and the backward view (target -> source).
The backward view's encoder input is byte-identical to the forward view's
decoder output, which is what lets one model's encoder act as a teacher for
the other model's decode steps with no re-tokenization.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IntegrityError
from .rng import stream

PAD_ID = 0
SOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
N_RESERVED = len(RESERVED)


class Vocabulary:
    """Token/id mapping. Ids 0..3 are reserved; file line i maps to id i+4."""

    def __init__(self, tokens: list[str]):
        seen = set()
        for tok in tokens:
            if not tok or " " in tok:
                raise ConfigError(f"bad vocabulary token {tok!r}")
            if tok in RESERVED:
                raise ConfigError(f"reserved token {tok!r} in vocabulary")
            if tok in seen:
                raise ConfigError(f"duplicate vocabulary token {tok!r}")
            seen.add(tok)
        self.tokens = list(tokens)
        self._ids = {tok: i + N_RESERVED for i, tok in enumerate(tokens)}

    @classmethod
    def from_corpus(cls, sentences) -> "Vocabulary":
        """Frequency-descending order, ties broken lexicographically."""
        counts: dict[str, int] = {}
        for sent in sentences:
            for tok in sent:
                counts[tok] = counts.get(tok, 0) + 1
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(ordered)

    def __len__(self) -> int:
        return len(self.tokens) + N_RESERVED

    def encode(self, sent: list[str]) -> np.ndarray:
        return np.array([self._ids.get(tok, UNK_ID) for tok in sent],
                        dtype=np.int64)

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i in (PAD_ID, SOS_ID):
                continue
            if i == EOS_ID:
                break
            out.append(RESERVED[i] if i < N_RESERVED else
                       self.tokens[i - N_RESERVED])
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.strip()]
        return cls(tokens)


class ParallelCorpus:
    """Aligned sentence pairs; neither side of a pair may be empty."""

    def __init__(self, pairs: list[tuple[list[str], list[str]]]):
        for k, (src, tgt) in enumerate(pairs):
            if not src or not tgt:
                raise IntegrityError(f"empty side in sentence pair {k}")
        self.pairs = list(pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def save(self, prefix) -> None:
        prefix = str(prefix)
        with open(prefix + ".src", "w", encoding="utf-8") as fs, \
                open(prefix + ".tgt", "w", encoding="utf-8") as ft:
            for src, tgt in self.pairs:
                fs.write(" ".join(src) + "\n")
                ft.write(" ".join(tgt) + "\n")

    @classmethod
    def load(cls, prefix) -> "ParallelCorpus":
        prefix = str(prefix)
        with open(prefix + ".src", encoding="utf-8") as fh:
            src_lines = fh.read().splitlines()
        with open(prefix + ".tgt", encoding="utf-8") as fh:
            tgt_lines = fh.read().splitlines()
        if len(src_lines) != len(tgt_lines):
            raise IntegrityError(
                f"line count mismatch: {len(src_lines)} source vs "
                f"{len(tgt_lines)} target")
        return cls([(s.split(), t.split())
                    for s, t in zip(src_lines, tgt_lines)])

    def digest(self) -> str:
        h = hashlib.sha256()
        for src, tgt in self.pairs:
            h.update((" ".join(src) + "\t" + " ".join(tgt) + "\n").encode())
        return h.hexdigest()


TASKS = ("copy", "reverse", "mapped")


@dataclass
class SyntheticTaskSpec:
    """A fully seeded description of one synthetic corpus."""

    task: str
    vocab_size: int = 32
    min_len: int = 4
    max_len: int = 16
    size: int = 20000
    seed: int = 0
    window: int = 1  # mapped only: length of locally shuffled blocks

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}, pick from {TASKS}")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        if self.task == "mapped" and self.vocab_size < 2:
            raise ConfigError("mapped task needs vocab_size >= 2 for a "
                              "non-identity bijection")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(
                f"bad length range [{self.min_len}, {self.max_len}]")
        if self.size < 1:
            raise ConfigError("corpus size must be >= 1")
        if self.window < 1:
            raise ConfigError("window must be >= 1")


def _nonidentity_permutation(rng: np.random.Generator, n: int) -> np.ndarray:
    if n < 2:
        raise ConfigError("a non-identity permutation needs n >= 2")
    while True:
        perm = rng.permutation(n)
        if not np.array_equal(perm, np.arange(n)):
            return perm


def task_tokens(vocab_size: int) -> list[str]:
    return [f"tok{i:03d}" for i in range(vocab_size)]


def generate(spec: SyntheticTaskSpec) -> ParallelCorpus:
    """Purely seed-determined corpus for the given task."""
    rng = stream(spec.seed, f"data/gen/{spec.task}")
    tokens = task_tokens(spec.vocab_size)
    if spec.task == "mapped":
        mapping = (_nonidentity_permutation(rng, spec.vocab_size)
                   if spec.vocab_size >= 2 else np.arange(spec.vocab_size))
        shuffle = (_nonidentity_permutation(rng, spec.window)
                   if spec.window > 1 else np.arange(spec.window))
    pairs = []
    for _ in range(spec.size):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        src_idx = rng.integers(0, spec.vocab_size, size=n)
        if spec.task == "copy":
            tgt_idx = src_idx
        elif spec.task == "reverse":
            tgt_idx = src_idx[::-1]
        else:
            tgt_idx = mapping[src_idx]
            if spec.window > 1:
                tgt_idx = tgt_idx.copy()
                w = spec.window
                for start in range(0, n - n % w, w):
                    tgt_idx[start:start + w] = tgt_idx[start:start + w][shuffle]
        pairs.append(([tokens[i] for i in src_idx],
                      [tokens[i] for i in tgt_idx]))
    return ParallelCorpus(pairs)


def is_dev_pair(seed: int, index: int) -> bool:
    digest = hashlib.blake2s(f"{seed}:{index}".encode(),
                             digest_size=8).digest()
    return int.from_bytes(digest, "little") % 10 == 0


def split_corpus(corpus: ParallelCorpus,
                 seed: int) -> tuple[ParallelCorpus, ParallelCorpus]:
    """Stable ~90/10 split keyed by seeded hash of the pair index."""
    train, dev = [], []
    for i, pair in enumerate(corpus.pairs):
        (dev if is_dev_pair(seed, i) else train).append(pair)
    if not train or not dev:
        raise ConfigError(
            f"corpus of {len(corpus)} pairs is too small to split")
    return ParallelCorpus(train), ParallelCorpus(dev)


@dataclass
class DualBatch:
    """One batch in both translation directions.

    Shapes: I = longest source in the batch + 1 (EOS), T = longest target
    + 1. The backward view reuses the forward arrays: src_bwd is dec_out_fwd
    and dec_out_bwd is src_fwd, so teachers and students always see the same
    token ids.
    """

    src_fwd: np.ndarray       # [B, I] source + EOS, padded
    dec_in_fwd: np.ndarray    # [B, T] SOS + target
    dec_out_fwd: np.ndarray   # [B, T] target + EOS
    dec_in_bwd: np.ndarray    # [B, I] SOS + source

    @property
    def src_bwd(self) -> np.ndarray:
        return self.dec_out_fwd

    @property
    def dec_out_bwd(self) -> np.ndarray:
        return self.src_fwd

    @property
    def size(self) -> int:
        return self.src_fwd.shape[0]

    @property
    def src_valid_fwd(self) -> np.ndarray:
        return self.src_fwd != PAD_ID

    @property
    def step_valid_fwd(self) -> np.ndarray:
        """True at decode steps whose prediction target is a real token."""
        return self.dec_out_fwd != PAD_ID

    @property
    def src_valid_bwd(self) -> np.ndarray:
        return self.src_bwd != PAD_ID

    @property
    def step_valid_bwd(self) -> np.ndarray:
        return self.dec_out_bwd != PAD_ID

    def triangular_bias(self, side: str, kind: str) -> np.ndarray:
        """Direction-limiting attention bias sized for this batch's side."""
        from .transformer import make_triangular_bias  # avoid import cycle
        length = (self.src_fwd if side == "src" else
                  self.dec_out_fwd).shape[1]
        return make_triangular_bias(length, kind)


def _pad_block(rows: list[np.ndarray], width: int) -> np.ndarray:
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for k, row in enumerate(rows):
        out[k, :len(row)] = row
    return out


def encode_pair(src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                src: list[str], tgt: list[str]) -> dict:
    s = src_vocab.encode(src)
    t = tgt_vocab.encode(tgt)
    return {
        "src": np.concatenate([s, [EOS_ID]]),
        "dec_in": np.concatenate([[SOS_ID], t]),
        "dec_out": np.concatenate([t, [EOS_ID]]),
        "dec_in_bwd": np.concatenate([[SOS_ID], s]),
    }


def make_batches(corpus: ParallelCorpus, src_vocab: Vocabulary,
                 tgt_vocab: Vocabulary, batch_size: int, seed: int,
                 epoch: int = 0, max_len: int = 64) -> list[DualBatch]:
    """Deterministic length-bucketed batches for one epoch.

    Pairs whose padded length would exceed max_len are dropped. Bucketing
    groups similar target lengths (bucket width 4) to limit pad waste; the
    batch order and within-bucket order are reshuffled per epoch.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    rng = stream(seed, f"data/batches/{epoch}")
    usable = [p for p in corpus.pairs
              if len(p[0]) + 1 <= max_len and len(p[1]) + 1 <= max_len]
    if not usable:
        raise ConfigError(f"no pairs fit within max_len={max_len}")

    buckets: dict[int, list] = {}
    for pair in usable:
        buckets.setdefault(len(pair[1]) // 4, []).append(pair)

    chunks = []
    for key in sorted(buckets):
        group = buckets[key]
        order = rng.permutation(len(group))
        group = [group[i] for i in order]
        for k in range(0, len(group), batch_size):
            chunks.append(group[k:k + batch_size])
    chunk_order = rng.permutation(len(chunks))

    batches = []
    for ci in chunk_order:
        rows = [encode_pair(src_vocab, tgt_vocab, s, t)
                for s, t in chunks[ci]]
        width_i = max(len(r["src"]) for r in rows)
        width_t = max(len(r["dec_out"]) for r in rows)
        batches.append(DualBatch(
            src_fwd=_pad_block([r["src"] for r in rows], width_i),
            dec_in_fwd=_pad_block([r["dec_in"] for r in rows], width_t),
            dec_out_fwd=_pad_block([r["dec_out"] for r in rows], width_t),
            dec_in_bwd=_pad_block([r["dec_in_bwd"] for r in rows], width_i),
        ))
    return batches
