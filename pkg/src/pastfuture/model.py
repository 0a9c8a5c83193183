"""One translation direction: transformer, step capsules, head, extractor.

Each DirectionModel owns its ParamStore. The "step" capsule module is the
guided one the prediction head consumes; the "extract" module is the
unguided one used when this model's encoder serves as a teacher for the
reverse model. They share nothing but shapes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .capsules import (CapsuleConfig, GroupMask, RoutingState,
                       build_capsule_params, run_guided_routing,
                       run_masked_routing)
from .data import PAD_ID
from .errors import ContractError
from .head import build_head_params, holistic_context, output_logits
from .params import ParamStore
from .transformer import (EncoderOutput, ModelConfig, Transformer,
                          make_triangular_bias)


class DirectionModel:
    def __init__(self, mcfg: ModelConfig, ccfg: CapsuleConfig,
                 rng: np.random.Generator, dtype=np.float64):
        self.mcfg = mcfg
        self.ccfg = ccfg
        self.dtype = dtype
        self.params = ParamStore()
        self.transformer = Transformer(mcfg, self.params, rng, dtype)
        build_capsule_params(self.params, "caps.step.", mcfg.d_model, ccfg,
                             rng, dtype, guided=True)
        build_capsule_params(self.params, "caps.extract.", mcfg.d_model,
                             ccfg, rng, dtype, guided=False)
        build_head_params(self.params, "head.", mcfg.d_model, ccfg,
                          mcfg.tgt_vocab, rng, dtype)

    # -- encoding -----------------------------------------------------------

    def encode(self, src_ids: np.ndarray, bias_kind: str | None = None,
               train: bool = False, rng=None) -> EncoderOutput:
        """Encode source ids, optionally under a past/future direction bias."""
        bias = None
        if bias_kind is not None:
            bias = make_triangular_bias(np.atleast_2d(src_ids).shape[1],
                                        bias_kind)
        return self.transformer.encode(src_ids, bias, train, rng)

    def decode(self, prefix_ids: np.ndarray, enc: EncoderOutput,
               train: bool = False, rng=None) -> Tensor:
        return self.transformer.decode_all(prefix_ids, enc, train, rng)

    # -- capsule paths ------------------------------------------------------

    def route_steps(self, enc: EncoderOutput, z: Tensor) -> RoutingState:
        """Guided routing of this model's own encoder states, one result
        per decode step. Pad source rows never contribute."""
        low_mask = enc.valid[:, None, :]
        return run_guided_routing(
            enc.h, z, self.params["caps.step.W"],
            self.params["caps.step.guide_w"],
            self.params["caps.step.guide_Wb"], self.ccfg, low_mask)

    def extract(self, enc: EncoderOutput, row_mask: np.ndarray,
                which: str, use_agreement: bool = True) -> Tensor:
        """Teacher capsules of one group from a biased encoder pass.

        row_mask [B, S, L] limits each extraction to prefix or suffix rows.
        Returns the allowed group's capsules only, [B, S, n, Dc].
        """
        if which == "past":
            group = GroupMask.past_only(self.ccfg)
            sl = self.ccfg.past_slice
        elif which == "future":
            group = GroupMask.future_only(self.ccfg)
            sl = self.ccfg.future_slice
        else:
            raise ContractError(f"extraction group must be past or future, "
                                f"got {which!r}")
        state = run_masked_routing(enc.h, group,
                                   self.params["caps.extract.W"], self.ccfg,
                                   row_mask, use_agreement)
        return state.omega[:, :, sl, :]

    # -- prediction ---------------------------------------------------------

    def step_logits(self, z: Tensor, omega: Tensor) -> Tensor:
        o = holistic_context(z, omega, self.params["head.W_o"],
                             self.params["head.b_o"])
        return output_logits(o, self.params["head.W_v"],
                             self.params["head.b_v"])

    def forward_scores(self, src_ids: np.ndarray, dec_in: np.ndarray,
                       train: bool = False, rng=None
                       ) -> tuple[Tensor, RoutingState, Tensor, EncoderOutput]:
        """Student pass: logits for every step plus the routing state."""
        enc = self.encode(src_ids, None, train, rng)
        z = self.decode(dec_in, enc, train, rng)
        state = self.route_steps(enc, z)
        logits = self.step_logits(z, state.omega)
        return logits, state, z, enc

    def cross_entropy(self, logits: Tensor, dec_out: np.ndarray,
                      label_smoothing: float = 0.0) -> Tensor:
        return ad.cross_entropy(logits, dec_out, pad_id=PAD_ID,
                                label_smoothing=label_smoothing)
