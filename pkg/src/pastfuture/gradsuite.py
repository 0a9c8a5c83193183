"""Finite-difference verification of the whole differentiable surface.

Runs grad_check over every primitive, the composite blocks, and the
complete joint loss with both directions' consistency terms active.
This is the suite behind the `gradcheck` command; everything runs in
float64 at small widths so the full pass stays under a few minutes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .capsules import (CapsuleConfig, GroupMask, run_guided_routing,
                       run_masked_routing, squash)
from .data import SyntheticTaskSpec, Vocabulary, generate, make_batches
from .dual import DualLossConfig, dual_losses
from .head import holistic_context
from .model import DirectionModel
from .rng import stream
from .transformer import ModelConfig

DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        mark = "ok  " if self.passed else "FAIL"
        return f"{mark} {self.name:<42s} {self.max_rel_err:.3e}"


def _primitive_checks(rng):
    """(name, f, x) triples covering each differentiable primitive.

    Every value a closure reads is hoisted out of the lambda: grad_check
    calls f repeatedly, so f must be a pure function of x alone.
    """
    def t(*shape):
        return Tensor(rng.normal(size=shape))

    def probe(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    a, b = t(3, 4), t(3, 4)
    m2 = t(5, 2)
    w32, w43, w33, w243, w233, w2653 = (t(3), t(4, 3), t(3, 2), t(2, 4, 3),
                                        t(2, 3, 3), t(2, 6, 5, 3))
    w38, w22, w34, w543, w47 = t(3, 8), t(2, 2), t(3, 4), t(5, 4, 3), t(4, 7)
    g4, bias4 = t(4), t(4)
    targets = np.array([1, 0, 6, 2])
    mask = rng.random((3, 4)) < 0.5
    idx = np.array([2, 0, 1])

    def dropped(x):
        return ad.tensor_sum(ad.dropout(x, 0.4, stream(7, "gs")) * b)

    return [
        ("add", lambda x: ad.tensor_sum(x + b), probe(3, 4)),
        ("sub", lambda x: ad.tensor_sum(x - b), probe(3, 4)),
        ("mul", lambda x: ad.tensor_sum(x * b), probe(3, 4)),
        ("div", lambda x: ad.tensor_sum(x / (b * b + 1.0)), probe(3, 4)),
        ("neg", lambda x: ad.tensor_sum(-x * b), probe(3, 4)),
        ("broadcast-add", lambda x: ad.tensor_sum((a + x) * b), probe(4)),
        ("tanh", lambda x: ad.tensor_sum(ad.tanh(x) * b), probe(3, 4)),
        ("relu", lambda x: ad.tensor_sum(ad.relu(x) * b),
         Tensor(rng.normal(size=(3, 4)) + 0.3, requires_grad=True)),
        ("sum-axis", lambda x: ad.tensor_sum(ad.tensor_sum(x, axis=1)
                                             * w32), probe(3, 4)),
        ("mean", lambda x: ad.mean(x * b), probe(3, 4)),
        ("reshape", lambda x: ad.tensor_sum(ad.reshape(x, (4, 3)) * w43),
         probe(3, 4)),
        ("transpose", lambda x: ad.tensor_sum(ad.transpose(x, (1, 0))
                                              * w43), probe(3, 4)),
        ("swapaxes", lambda x: ad.tensor_sum(ad.swapaxes(x, 0, 2)
                                             * w243), probe(3, 4, 2)),
        ("concat", lambda x: ad.tensor_sum(ad.concat([x, b], axis=1)
                                           * w38), probe(3, 4)),
        ("getitem", lambda x: ad.tensor_sum(x[1:, ::2] * w22), probe(3, 4)),
        ("mask_fill", lambda x: ad.tensor_sum(ad.mask_fill(x, mask, -2.0)
                                              * b), probe(3, 4)),
        ("matmul", lambda x: ad.tensor_sum(ad.matmul(x, m2) * w33),
         probe(3, 5)),
        ("matmul-batched",
         lambda x: ad.tensor_sum(ad.matmul(x, w243) * w233), probe(2, 3, 4)),
        ("einsum2",
         lambda x: ad.tensor_sum(ad.einsum2("bid,jdc->bijc", x, w543)
                                 * w2653), probe(2, 6, 4)),
        ("gather_rows",
         lambda x: ad.tensor_sum(ad.gather_rows(x, idx) * w34), probe(5, 4)),
        ("softmax", lambda x: ad.tensor_sum(ad.softmax(x, axis=-1) * b),
         probe(3, 4)),
        ("l2_norm", lambda x: ad.tensor_sum(ad.l2_norm(x, axis=-1) * w32),
         probe(3, 4)),
        ("layer_norm",
         lambda x: ad.tensor_sum(ad.layer_norm(x, g4, bias4) * b),
         probe(3, 4)),
        ("layer_norm-gain",
         lambda x: ad.tensor_sum(ad.layer_norm(a, x, bias4) * b), probe(4)),
        ("cross_entropy",
         lambda x: ad.cross_entropy(x, targets, pad_id=0),
         Tensor(w47.data.copy(), requires_grad=True)),
        ("cross_entropy-smoothed",
         lambda x: ad.cross_entropy(x, targets, pad_id=0,
                                    label_smoothing=0.1), probe(4, 7)),
        ("dropout", dropped, probe(3, 4)),
        ("squash", lambda x: ad.tensor_sum(squash(x) * w34), probe(3, 4)),
    ]


def _composite_checks(rng):
    ccfg = CapsuleConfig(capsule_dim=8, n_iterations=2)
    d = 16
    h = Tensor(rng.normal(size=(2, 5, d)))
    z = Tensor(rng.normal(size=(2, 3, d)))
    w_stack = Tensor(rng.normal(size=(ccfg.n_capsules, d, 8)) * 0.3,
                     requires_grad=True)
    w = Tensor(rng.normal(size=(8,)) * 0.3, requires_grad=True)
    w_b = Tensor(rng.normal(size=(8, d + 16)) * 0.3, requires_grad=True)
    low_mask = np.ones((2, 1, 5), dtype=bool)
    low_mask[1, 0, 4] = False
    row_mask = np.ones((2, 3, 5), dtype=bool)
    row_mask[:, 0, 2:] = False
    group = GroupMask.past_only(ccfg)
    omega = Tensor(rng.normal(size=(2, 3, ccfg.n_capsules, 8)) * 0.2,
                   requires_grad=True)
    w_o = Tensor(rng.normal(size=(d + ccfg.n_capsules * 8, d)) * 0.2,
                 requires_grad=True)
    b_o = Tensor(rng.normal(size=(d,)) * 0.2)

    def guided(x):
        state = run_guided_routing(h, z, x, w, w_b, ccfg, low_mask)
        return ad.tensor_sum(state.omega * state.omega)

    def guided_wb(x):
        state = run_guided_routing(h, z, w_stack, w, x, ccfg, low_mask)
        return ad.tensor_sum(state.omega * state.omega)

    def masked(x):
        state = run_masked_routing(h, group, x, ccfg, row_mask)
        return ad.tensor_sum(state.omega * state.omega)

    def head(x):
        o = holistic_context(z, omega, x, b_o)
        return ad.tensor_sum(o * o)

    def head_via_omega(x):
        o = holistic_context(z, x, w_o, b_o)
        return ad.tensor_sum(ad.tanh(o))

    return [
        ("routing-guided/W", guided, w_stack),
        ("routing-guided/guide_Wb", guided_wb, w_b),
        ("routing-masked/W", masked, w_stack),
        ("head/W_o", head, w_o),
        ("head/omega-path", head_via_omega, omega),
    ]


def _tiny_pair(seed=0):
    """Two direction models plus one paired batch, all at check scale."""
    spec = SyntheticTaskSpec(task="mapped", vocab_size=10, min_len=3,
                             max_len=5, size=16, seed=seed)
    corpus = generate(spec)
    sv = Vocabulary.from_corpus(p[0] for p in corpus.pairs)
    tv = Vocabulary.from_corpus(p[1] for p in corpus.pairs)
    batch = make_batches(corpus, sv, tv, batch_size=2, seed=seed,
                         max_len=12)[0]
    mk = dict(d_model=16, n_heads=2, n_layers=2, d_ff=32, dropout=0.0,
              max_len=12)
    ccfg = CapsuleConfig(capsule_dim=8, n_iterations=2)
    fwd = DirectionModel(ModelConfig(len(sv), len(tv), **mk), ccfg,
                         stream(seed, "model/fwd"))
    bwd = DirectionModel(ModelConfig(len(tv), len(sv), **mk), ccfg,
                         stream(seed, "model/bwd"))
    return batch, fwd, bwd


# parameters probed in the full-loss check: every architectural block of
# both models is represented without walking all ~100 tensors
FULL_LOSS_PARAMS = (
    ("fwd", "embed.src"),
    ("fwd", "enc.0.attn.wq.w"),
    ("fwd", "dec.1.cross_attn.wo.w"),
    ("fwd", "caps.step.W"),
    ("fwd", "caps.step.guide_Wb"),
    ("fwd", "caps.extract.W"),
    ("fwd", "head.W_o"),
    ("fwd", "head.W_v"),
    ("bwd", "embed.tgt"),
    ("bwd", "enc.1.ffn.w1.w"),
    ("bwd", "caps.step.guide_w"),
    ("bwd", "caps.extract.W"),
    ("bwd", "head.b_v"),
)


def _full_loss_checks(rng, coords_per_param=4):
    batch, fwd, bwd = _tiny_pair()
    models = {"fwd": fwd, "bwd": bwd}
    dcfg = DualLossConfig(lambda_past=0.5, lambda_future=0.5)

    def total_of(param):
        def f(x):
            # grad_check mutates x.data in place; x IS the live parameter
            assert x is param
            return dual_losses(batch, fwd, bwd, dcfg)["total"]
        return f

    checks = []
    for side, name in FULL_LOSS_PARAMS:
        param = models[side].params[name]
        checks.append((f"dual-loss/{side}.{name}", total_of(param), param,
                       coords_per_param))
    return checks


def run_suite(seed: int = 0, tol: float = DEFAULT_TOL, report=print,
              coords_per_param: int = 4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    sample_rng = np.random.default_rng(seed + 1)
    results = []
    started = time.time()

    for name, f, x in _primitive_checks(rng):
        err = grad_check(f, x, max_coords=8, rng=sample_rng)
        results.append(CheckResult(name, err, tol))
        report(results[-1].line())

    for name, f, x in _composite_checks(rng):
        err = grad_check(f, x, max_coords=6, rng=sample_rng)
        results.append(CheckResult(name, err, tol))
        report(results[-1].line())

    for name, f, x, coords in _full_loss_checks(rng, coords_per_param):
        err = grad_check(f, x, max_coords=coords, rng=sample_rng)
        results.append(CheckResult(name, err, tol))
        report(results[-1].line())

    worst = max(r.max_rel_err for r in results)
    n_bad = sum(not r.passed for r in results)
    report(f"{len(results)} checks, {n_bad} failures, worst {worst:.3e}, "
           f"{time.time() - started:.1f}s")
    return results


def suite_passed(results: list[CheckResult]) -> bool:
    return all(r.passed for r in results)
