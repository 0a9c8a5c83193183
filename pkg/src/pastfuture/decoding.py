"""Greedy autoregressive decoding for one direction model."""

import numpy as np

from .data import EOS_ID, PAD_ID, SOS_ID
from .errors import DimensionError

__all__ = ["greedy_decode", "translate_corpus"]


def greedy_decode(model, src_ids: np.ndarray, max_len: int | None = None):
    """Decode a padded batch of source id rows; returns a list of id lists.

    Feeds back the argmax token at every step and stops a sentence at its
    first EOS (excluded from the result) or after max_len emissions.
    Finished sentences keep feeding PAD so the batch stays rectangular.
    """
    src_ids = np.asarray(src_ids, dtype=np.int64)
    if src_ids.ndim != 2:
        raise DimensionError(f"expected [batch, length] ids, got "
                             f"{src_ids.shape}")
    if max_len is None:
        max_len = model.mcfg.max_len - 1  # SOS occupies one position
    batch = src_ids.shape[0]

    enc = model.encode(src_ids)
    prefix = np.full((batch, 1), SOS_ID, dtype=np.int64)
    done = np.zeros(batch, dtype=bool)
    outputs: list[list[int]] = [[] for _ in range(batch)]

    for _ in range(max_len):
        dec = model.decode(prefix, enc)
        z_last = dec[:, -1:, :]
        state = model.route_steps(enc, z_last)
        logits = model.step_logits(z_last, state.omega)
        next_ids = np.argmax(logits.data[:, -1, :], axis=-1)
        next_ids[done] = PAD_ID
        for b in range(batch):
            if done[b]:
                continue
            if next_ids[b] == EOS_ID:
                done[b] = True
            else:
                outputs[b].append(int(next_ids[b]))
        prefix = np.concatenate([prefix, next_ids[:, None]], axis=1)
        if done.all():
            break
    return outputs


def translate_corpus(model, src_vocab, tgt_vocab, sentences,
                     batch_size: int = 32, max_len: int | None = None):
    """Token sentences in, token sentences out, order preserved."""
    hyps: list[list[str]] = []
    for at in range(0, len(sentences), batch_size):
        chunk = sentences[at:at + batch_size]
        encoded = [np.concatenate([src_vocab.encode(s), [EOS_ID]])
                   for s in chunk]
        width = max(len(e) for e in encoded)
        ids = np.full((len(chunk), width), PAD_ID, dtype=np.int64)
        for k, e in enumerate(encoded):
            ids[k, :len(e)] = e
        for out in greedy_decode(model, ids, max_len=max_len):
            hyps.append(tgt_vocab.decode(out))
    return hyps
