"""Joint training of two direction-reversed models with shared supervision.

At decode step t the forward model's guided routing produces a Past group
(what should already be covered) and a Future group (what remains). The
reverse model, whose source side is this model's target side, encodes the
same token sequence once under a past-triangular bias and once under a
future-triangular bias; masked extraction over prefix rows 0..t yields the
teacher's view of the same Past, and over suffix rows t.. the teacher's
Future. The consistency losses pull student and teacher together, in both
translation directions at once.

Step indexing: student step s is the decoder row that predicts target
token s (0-based over [target + EOS]); the teacher prefix for step s is
rows 0..s inclusive and the suffix is rows s.. inclusive, so the token
being predicted sits in both views' boundary row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .data import DualBatch
from .errors import ConfigError, NumericalAbort
from .model import DirectionModel
from .transformer import EncoderOutput


@dataclass
class DualLossConfig:
    lambda_past: float = 0.5
    lambda_future: float = 0.5
    stop_gradient_teacher: bool = False
    step_subsample: float = 1.0  # fraction of valid steps entering the loss

    def __post_init__(self):
        if self.lambda_past < 0.0 or self.lambda_future < 0.0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 < self.step_subsample <= 1.0:
            raise ConfigError("step_subsample must be in (0, 1]")

    @property
    def active(self) -> bool:
        return self.lambda_past > 0.0 or self.lambda_future > 0.0


@dataclass
class StepPairing:
    """Bookkeeping for one student step / teacher rows correspondence."""

    direction: str        # "forward" or "backward"
    sentence: int
    step: int
    past_rows: np.ndarray    # teacher row indices for the Past view
    future_rows: np.ndarray  # teacher row indices for the Future view


def pairing_row_masks(step_valid: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Past and future teacher row masks, [B, S, S].

    step_valid [B, S] marks decode steps that predict a real token; the
    teacher sequence has the same length and the same valid positions
    because it is literally the same id array.
    """
    _, s_len = step_valid.shape
    steps = np.arange(s_len)
    past_tri = steps[None, :, None] >= steps[None, None, :]   # rows <= step
    future_tri = steps[None, :, None] <= steps[None, None, :]  # rows >= step
    rows_ok = step_valid[:, None, :]
    steps_ok = step_valid[:, :, None]
    return past_tri & rows_ok & steps_ok, future_tri & rows_ok & steps_ok


def enumerate_step_pairings(batch: DualBatch) -> list[StepPairing]:
    """Explicit pairing list, mainly for inspection and tests."""
    out = []
    for direction, step_valid in (("forward", batch.step_valid_fwd),
                                  ("backward", batch.step_valid_bwd)):
        past_m, future_m = pairing_row_masks(step_valid)
        bsz, s_len = step_valid.shape
        for b in range(bsz):
            for s in range(s_len):
                if not step_valid[b, s]:
                    continue
                out.append(StepPairing(
                    direction=direction, sentence=b, step=s,
                    past_rows=np.nonzero(past_m[b, s])[0],
                    future_rows=np.nonzero(future_m[b, s])[0]))
    return out


def teacher_encode_all(model: DirectionModel, seq_ids: np.ndarray,
                       kind: str, train: bool = False,
                       rng=None) -> EncoderOutput:
    """One biased encoder pass whose row t equals encoding the prefix
    (kind="past") or suffix (kind="future") that ends or starts at t."""
    return model.encode(seq_ids, kind, train, rng)


def extract_teacher_capsules(model: DirectionModel, enc: EncoderOutput,
                             row_mask: np.ndarray, which: str) -> Tensor:
    """Masked extraction of the named group; see DirectionModel.extract."""
    return model.extract(enc, row_mask, which)


def consistency_loss(student: Tensor, teacher: Tensor,
                     step_mask: np.ndarray | None = None,
                     detach_teacher: bool = False) -> Tensor:
    """Sum over group capsules of ||student - teacher||, averaged over the
    selected steps (and batch). Inputs are [..., n, Dc]."""
    if teacher.shape != student.shape:
        raise ConfigError(f"capsule group shapes disagree: student "
                          f"{student.shape}, teacher {teacher.shape}")
    if detach_teacher:
        teacher = ad.detach(teacher)
    dist = ad.l2_norm(student - teacher, axis=-1)   # [..., n]
    per_step = ad.tensor_sum(dist, axis=-1)          # [...]
    if per_step.ndim == 0:
        return per_step
    if step_mask is None:
        return ad.mean(per_step)
    m = np.asarray(step_mask, dtype=student.data.dtype)
    count = float(m.sum())
    if count == 0.0:
        raise ConfigError("consistency loss over zero selected steps")
    return ad.tensor_sum(per_step * Tensor(m)) / count


def subsample_steps(step_valid: np.ndarray, rate: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Random subset of valid steps; falls back to all valid steps when
    the draw selects none."""
    if rate >= 1.0:
        return step_valid
    pick = (rng.random(step_valid.shape) < rate) & step_valid
    if not pick.any():
        return step_valid
    return pick


@dataclass
class DualLossReport:
    ce_fwd: float
    ce_bwd: float
    l_past: float
    l_future: float
    total: float


def dual_losses(batch: DualBatch, fwd: DirectionModel, bwd: DirectionModel,
                dcfg: DualLossConfig, train: bool = False, rng=None,
                sub_rng=None, label_smoothing: float = 0.0) -> dict:
    """All loss terms for one paired batch; no backward pass here.

    Returns tensors keyed ce_fwd, ce_bwd, l_past, l_future, total. When
    both loss weights are zero no teacher computation happens at all, so
    the forward model's gradient graph is exactly the baseline one.
    """
    logits_f, state_f, _, _ = fwd.forward_scores(
        batch.src_fwd, batch.dec_in_fwd, train, rng)
    ce_f = fwd.cross_entropy(logits_f, batch.dec_out_fwd, label_smoothing)
    logits_b, state_b, _, _ = bwd.forward_scores(
        batch.src_bwd, batch.dec_in_bwd, train, rng)
    ce_b = bwd.cross_entropy(logits_b, batch.dec_out_bwd, label_smoothing)
    total = ce_f + ce_b
    out = {"ce_fwd": ce_f, "ce_bwd": ce_b}

    if dcfg.active:
        ccfg = fwd.ccfg
        # teacher passes: the reverse model reads the student's target side
        past_m_f, future_m_f = pairing_row_masks(batch.step_valid_fwd)
        past_m_b, future_m_b = pairing_row_masks(batch.step_valid_bwd)
        enc_b_past = teacher_encode_all(bwd, batch.src_bwd, "past",
                                        train, rng)
        enc_b_future = teacher_encode_all(bwd, batch.src_bwd, "future",
                                          train, rng)
        enc_f_past = teacher_encode_all(fwd, batch.src_fwd, "past",
                                        train, rng)
        enc_f_future = teacher_encode_all(fwd, batch.src_fwd, "future",
                                          train, rng)

        t_past_f = extract_teacher_capsules(bwd, enc_b_past, past_m_f,
                                            "past")
        t_future_f = extract_teacher_capsules(bwd, enc_b_future, future_m_f,
                                              "future")
        t_past_b = extract_teacher_capsules(fwd, enc_f_past, past_m_b,
                                            "past")
        t_future_b = extract_teacher_capsules(fwd, enc_f_future, future_m_b,
                                              "future")

        sel_f = batch.step_valid_fwd
        sel_b = batch.step_valid_bwd
        if dcfg.step_subsample < 1.0:
            if sub_rng is None:
                raise ConfigError("step_subsample < 1 needs a generator")
            sel_f = subsample_steps(sel_f, dcfg.step_subsample, sub_rng)
            sel_b = subsample_steps(sel_b, dcfg.step_subsample, sub_rng)

        s_past_f = state_f.omega[:, :, ccfg.past_slice, :]
        s_future_f = state_f.omega[:, :, ccfg.future_slice, :]
        s_past_b = state_b.omega[:, :, ccfg.past_slice, :]
        s_future_b = state_b.omega[:, :, ccfg.future_slice, :]

        detach = dcfg.stop_gradient_teacher
        l_past = (consistency_loss(s_past_f, t_past_f, sel_f, detach)
                  + consistency_loss(s_past_b, t_past_b, sel_b, detach))
        l_future = (consistency_loss(s_future_f, t_future_f, sel_f, detach)
                    + consistency_loss(s_future_b, t_future_b, sel_b,
                                       detach))
        total = total + dcfg.lambda_past * l_past \
            + dcfg.lambda_future * l_future
        out["l_past"] = l_past
        out["l_future"] = l_future
    out["total"] = total
    return out


def _check_finite(name: str, value: float) -> None:
    if not np.isfinite(value):
        raise NumericalAbort(f"non-finite loss component {name}: {value}")


def dual_step(batch: DualBatch, fwd: DirectionModel, bwd: DirectionModel,
              dcfg: DualLossConfig, train: bool = True, rng=None,
              sub_rng=None, label_smoothing: float = 0.0) -> DualLossReport:
    """One joint forward/backward pass. Gradients land in both models'
    parameter stores; the caller owns the optimizer step."""
    with Tape():
        losses = dual_losses(batch, fwd, bwd, dcfg, train, rng, sub_rng,
                             label_smoothing)
        report = DualLossReport(
            ce_fwd=losses["ce_fwd"].item(),
            ce_bwd=losses["ce_bwd"].item(),
            l_past=losses["l_past"].item() if "l_past" in losses else 0.0,
            l_future=(losses["l_future"].item()
                      if "l_future" in losses else 0.0),
            total=losses["total"].item(),
        )
        for key in ("ce_fwd", "ce_bwd", "l_past", "l_future", "total"):
            _check_finite(key, getattr(report, key))
        backward(losses["total"])
    return report
