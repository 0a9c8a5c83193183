"""Prediction head: fuse decoder state with routed capsules, then project.

The fused context is Linear([z; omega_flat]) + z, a residual around the
decoder state, so zeroing the fusion weights recovers a plain transformer
head (softmax of W_v z + b_v) exactly.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .capsules import CapsuleConfig
from .errors import DimensionError
from .params import ParamStore, xavier_uniform


def build_head_params(store: ParamStore, prefix: str, d_model: int,
                      ccfg: CapsuleConfig, tgt_vocab: int,
                      rng: np.random.Generator, dtype=np.float64) -> None:
    width = d_model + ccfg.n_capsules * ccfg.capsule_dim
    store.add(prefix + "W_o",
              Tensor(xavier_uniform(rng, (width, d_model), dtype)))
    store.add(prefix + "b_o", Tensor(np.zeros(d_model, dtype=dtype)))
    store.add(prefix + "W_v",
              Tensor(xavier_uniform(rng, (d_model, tgt_vocab), dtype)))
    store.add(prefix + "b_v", Tensor(np.zeros(tgt_vocab, dtype=dtype)))


def _promote(z: Tensor, omega: Tensor) -> tuple[Tensor, Tensor, tuple]:
    if z.ndim == 1 and omega.ndim == 2:
        return (ad.reshape(z, (1, 1, -1)),
                ad.reshape(omega, (1, 1) + omega.shape), ())
    if z.ndim == 2 and omega.ndim == 3:
        return (ad.reshape(z, (1,) + z.shape),
                ad.reshape(omega, (1,) + omega.shape), z.shape[:1])
    if z.ndim == 3 and omega.ndim == 4:
        return z, omega, z.shape[:2]
    raise DimensionError(
        f"mismatched head inputs: z {z.shape}, capsules {omega.shape}")


def holistic_context(z: Tensor, omega: Tensor, w_o: Tensor,
                     b_o: Tensor) -> Tensor:
    """o = Linear([z; capsules]) + z for each decode step.

    z [B, S, D] with omega [B, S, J, Dc]; per-sentence and single-step
    shapes promote the same way the routing functions do.
    """
    z3, om4, lead = _promote(z, omega)
    bsz, s_len = om4.shape[0], om4.shape[1]
    flat = ad.reshape(om4, (bsz, s_len, om4.shape[2] * om4.shape[3]))
    fused = ad.concat([z3, flat], axis=-1) @ w_o + b_o + z3
    return ad.reshape(fused, lead + (z3.shape[-1],))


def output_logits(o: Tensor, w_v: Tensor, b_v: Tensor) -> Tensor:
    if o.ndim == 1:
        return ad.reshape(ad.reshape(o, (1, -1)) @ w_v + b_v, (w_v.shape[1],))
    return o @ w_v + b_v


def output_distribution(o: Tensor, w_v: Tensor, b_v: Tensor) -> Tensor:
    """Vocabulary softmax over the fused context."""
    return ad.softmax(output_logits(o, w_v, b_v), axis=-1)
