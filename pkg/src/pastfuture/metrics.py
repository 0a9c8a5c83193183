"""Corpus-level translation quality measures.

BLEU here is the 4-gram variant with add-1 smoothing applied to orders
2..4 only; a zero unigram precision short-circuits to 0.0 rather than
being smoothed away. The adequacy proxies compare per-sentence token
multisets and pool the counts over the corpus.
"""

import math
from collections import Counter
from dataclasses import dataclass, fields

from .errors import ContractError

__all__ = ["bleu4", "adequacy_proxy", "MetricsReport"]

MAX_ORDER = 4


def _tokens(sentence, lowercase):
    if isinstance(sentence, str):
        sentence = sentence.split()
    toks = [str(t) for t in sentence]
    if lowercase:
        toks = [t.lower() for t in toks]
    return toks


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypotheses, references, lowercase=True):
    """Corpus BLEU as a percentage in [0, 100].

    Sentences may be token lists or whitespace-separated strings. The
    brevity penalty uses total lengths, so the score is invariant under
    reordering of the sentence pairs.
    """
    if len(hypotheses) != len(references):
        raise ContractError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ContractError("empty corpus")

    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = _tokens(hyp, lowercase)
        r = _tokens(ref, lowercase)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, MAX_ORDER + 1):
            counts = _ngrams(h, n)
            if not counts:
                continue
            ref_counts = _ngrams(r, n)
            totals[n - 1] += sum(counts.values())
            matches[n - 1] += sum(min(c, ref_counts[g])
                                  for g, c in counts.items())

    if totals[0] == 0 or matches[0] == 0:
        return 0.0

    log_p = math.log(matches[0] / totals[0])
    for n in range(2, MAX_ORDER + 1):
        # add-1 smoothing for the sparse higher orders only
        log_p += math.log((matches[n - 1] + 1) / (totals[n - 1] + 1))

    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / MAX_ORDER)


def adequacy_proxy(hypotheses, references, lowercase=True):
    """Micro-averaged (under_rate, over_rate) token-multiset deficits.

    under counts reference tokens missing from the hypothesis, over
    counts hypothesis tokens with no reference support; both are
    normalized by the total reference token count and clamped to [0, 1].
    """
    if len(hypotheses) != len(references):
        raise ContractError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references")
    under = 0
    over = 0
    ref_total = 0
    for hyp, ref in zip(hypotheses, references):
        hc = Counter(_tokens(hyp, lowercase))
        rc = Counter(_tokens(ref, lowercase))
        ref_total += sum(rc.values())
        for tok in hc.keys() | rc.keys():
            diff = rc[tok] - hc[tok]
            if diff > 0:
                under += diff
            else:
                over -= diff
    if ref_total == 0:
        return 0.0, (1.0 if over else 0.0)
    return min(1.0, under / ref_total), min(1.0, over / ref_total)


@dataclass
class MetricsReport:
    """One evaluation snapshot; serializes to a stable key=value line."""

    step: int
    ce_fwd: float
    ce_bwd: float
    l_past: float
    l_future: float
    bleu_fwd: float
    bleu_bwd: float
    under_rate: float
    over_rate: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ContractError(f"non-finite metric {f.name}={v!r}")
        for name in ("under_rate", "over_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v!r} outside [0, 1]")

    def as_line(self):
        parts = [f"step={self.step}"]
        parts += [f"{f.name}={getattr(self, f.name):.6f}"
                  for f in fields(self) if f.name != "step"]
        return " ".join(parts)

    @classmethod
    def from_line(cls, line):
        kv = dict(item.split("=", 1) for item in line.split())
        return cls(step=int(kv.pop("step")),
                   **{k: float(v) for k, v in kv.items()})
