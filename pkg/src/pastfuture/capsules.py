"""Guided dynamic capsule routing.

Encoder states are projected into J candidate capsules each (J = past +
future + redundant). Iterative routing distributes every low capsule's
vote across the J output columns via a per-row softmax, pools the votes,
and squashes the pooled vectors to norm < 1. Two flavors share the same
rounds:

- guided routing (student): between rounds the logits are nudged by a
  learned score of (decoder state, vote, pooled capsule), so the routing
  is conditioned on where the decoder currently stands;
- masked extraction routing (teacher): no decoder state exists, logits
  grow by the plain vote/capsule dot product, and a group mask confines
  the routing to the past or future columns only.

Internally everything is batched as u [B, I, J, Dc] and b [B, S, I, J]
(S decode steps share one set of votes); the per-sentence signatures
promote to that layout and squeeze back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .params import ParamStore, xavier_uniform

MASK_VALUE = -1e9


@dataclass
class CapsuleConfig:
    n_past: int = 2
    n_future: int = 2
    n_redundant: int = 1
    capsule_dim: int = 32
    n_iterations: int = 3

    def __post_init__(self):
        if self.n_past < 1 or self.n_future < 1:
            raise ConfigError("need at least one past and one future capsule")
        if self.n_redundant < 0:
            raise ConfigError("n_redundant must be >= 0")
        if self.capsule_dim < 1:
            raise ConfigError("capsule_dim must be >= 1")
        if self.n_iterations < 1:
            raise ConfigError("n_iterations must be >= 1")

    @property
    def n_capsules(self) -> int:
        return self.n_past + self.n_future + self.n_redundant

    @property
    def past_slice(self) -> slice:
        return slice(0, self.n_past)

    @property
    def future_slice(self) -> slice:
        return slice(self.n_past, self.n_past + self.n_future)

    @property
    def redundant_slice(self) -> slice:
        return slice(self.n_past + self.n_future, self.n_capsules)


@dataclass
class GroupMask:
    """Which capsule columns may receive routing mass."""

    allowed: np.ndarray  # bool [J]

    def __post_init__(self):
        self.allowed = np.asarray(self.allowed, dtype=bool)
        if self.allowed.ndim != 1:
            raise DimensionError("group mask must be one-dimensional")
        if not self.allowed.any():
            raise ContractError("group mask blocks every capsule column")

    @classmethod
    def past_only(cls, cfg: CapsuleConfig) -> "GroupMask":
        allowed = np.zeros(cfg.n_capsules, dtype=bool)
        allowed[cfg.past_slice] = True
        return cls(allowed)

    @classmethod
    def future_only(cls, cfg: CapsuleConfig) -> "GroupMask":
        allowed = np.zeros(cfg.n_capsules, dtype=bool)
        allowed[cfg.future_slice] = True
        return cls(allowed)

    def column_bias(self, dtype=np.float64) -> np.ndarray:
        return np.where(self.allowed, 0.0, MASK_VALUE).astype(dtype)


@dataclass
class RoutingState:
    """One round's view: logits b, coefficients c, pooled s, squashed omega."""

    b: Tensor
    c: Tensor
    s: Tensor
    omega: Tensor


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Scale to norm n^2/(1+n^2) along the axis; the origin maps to itself."""
    n = ad.l2_norm(s, axis=axis, keepdims=True)
    return s * (n / (n * n + 1.0))


def capsule_param_shapes(d_model: int, cfg: CapsuleConfig) -> dict:
    j, dc = cfg.n_capsules, cfg.capsule_dim
    return {
        "W": (j, d_model, dc),
        "guide_w": (dc,),
        "guide_Wb": (dc, d_model + 2 * dc),
    }


def build_capsule_params(store: ParamStore, prefix: str, d_model: int,
                         cfg: CapsuleConfig, rng: np.random.Generator,
                         dtype=np.float64, guided: bool = True) -> None:
    """Register one routing module's parameters under `prefix`."""
    shapes = capsule_param_shapes(d_model, cfg)
    store.add(prefix + "W", Tensor(xavier_uniform(rng, shapes["W"], dtype)))
    if guided:
        a = cfg.capsule_dim
        bound = np.sqrt(6.0 / (a + 1))
        store.add(prefix + "guide_w",
                  Tensor(rng.uniform(-bound, bound, a).astype(dtype)))
        store.add(prefix + "guide_Wb",
                  Tensor(xavier_uniform(rng, shapes["guide_Wb"], dtype)))


def project_low_capsules(h: Tensor, w_stack: Tensor) -> Tensor:
    """Votes u[..., i, j, :] = W_j @ h_i for every position and column."""
    if h.ndim == 2:
        return ad.einsum2("id,jdc->ijc", h, w_stack)
    if h.ndim == 3:
        return ad.einsum2("bid,jdc->bijc", h, w_stack)
    raise DimensionError(f"expected [I, D] or [B, I, D] states, got {h.shape}")


def _promote_round(u: Tensor, b: Tensor) -> tuple[Tensor, Tensor, bool]:
    if u.ndim == 3 and b.ndim == 2:
        i, j, dc = u.shape
        return (ad.reshape(u, (1, i, j, dc)),
                ad.reshape(b, (1, 1, i, j)), True)
    if u.ndim == 4 and b.ndim == 4:
        return u, b, False
    raise DimensionError(
        f"routing shapes disagree: votes {u.shape}, logits {b.shape}")


def routing_round(u: Tensor, b: Tensor, mask: GroupMask | None = None,
                  low_mask: np.ndarray | None = None) -> RoutingState:
    """softmax over columns, pool votes, squash.

    u [B, I, J, Dc] with b [B, S, I, J], or the per-sentence pair
    u [I, J, Dc] with b [I, J]. low_mask [B, S, I] zeroes the pooling
    contribution of excluded rows (pads, out-of-scope positions). Masked
    columns receive exactly zero coefficient and exactly zero omega.
    """
    u4, b4, squeezed = _promote_round(u, b)
    logits = b4
    if mask is not None:
        logits = logits + Tensor(mask.column_bias(u4.data.dtype))
    c = ad.softmax(logits, axis=-1)
    pooled_c = c
    if low_mask is not None:
        lm = np.asarray(low_mask, dtype=u4.data.dtype)
        if lm.ndim == 1:
            lm = lm[None, None]
        pooled_c = c * Tensor(lm[..., None])
    s = ad.einsum2("bsij,bijc->bsjc", pooled_c, u4)
    omega = squash(s)
    if mask is not None:
        omega = omega * Tensor(
            mask.allowed.astype(u4.data.dtype)[None, None, :, None])
    if squeezed:
        j, dc = u.shape[-2], u.shape[-1]
        return RoutingState(
            b=ad.reshape(logits, b.shape), c=ad.reshape(c, b.shape),
            s=ad.reshape(s, (j, dc)), omega=ad.reshape(omega, (j, dc)))
    return RoutingState(b=logits, c=c, s=s, omega=omega)


def guided_update(b: Tensor, u: Tensor, omega: Tensor, z: Tensor, w: Tensor,
                  w_b: Tensor, mask: GroupMask | None = None) -> Tensor:
    """Logit increment w . tanh(W_b [z; u; omega]), blockwise.

    Canonical shapes: b [B, S, I, J], u [B, I, J, Dc], omega [B, S, J, Dc],
    z [B, S, D]; or per-sentence b [I, J], u [I, J, Dc], omega [J, Dc],
    z [D]. Masked columns are left untouched.
    """
    squeezed = b.ndim == 2
    if squeezed:
        i, j = b.shape
        dc = u.shape[-1]
        b = ad.reshape(b, (1, 1, i, j))
        u = ad.reshape(u, (1, i, j, dc))
        omega = ad.reshape(omega, (1, 1, j, dc))
        z = ad.reshape(z, (1, 1, z.shape[-1]))
    bsz, s_len, i_len, j_len = b.shape
    d = z.shape[-1]
    dc = u.shape[-1]
    if w_b.shape[-1] != d + 2 * dc:
        raise DimensionError(
            f"guide matrix expects width {d + 2 * dc}, got {w_b.shape[-1]}")
    w_z = w_b[:, :d]
    w_u = w_b[:, d:d + dc]
    w_o = w_b[:, d + dc:]
    tz = ad.reshape(ad.einsum2("bsd,ad->bsa", z, w_z),
                    (bsz, s_len, 1, 1, -1))
    tu = ad.reshape(ad.einsum2("bijc,ac->bija", u, w_u),
                    (bsz, 1, i_len, j_len, -1))
    to = ad.reshape(ad.einsum2("bsjc,ac->bsja", omega, w_o),
                    (bsz, s_len, 1, j_len, -1))
    delta = ad.einsum2("bsija,a->bsij", ad.tanh(tz + tu + to), w)
    if mask is not None:
        delta = delta * Tensor(mask.allowed.astype(delta.data.dtype))
    out = b + delta
    if squeezed:
        return ad.reshape(out, (i_len, j_len))
    return out


def _promote_states(h: Tensor, z: Tensor | None):
    """Lift per-sentence inputs to [B, I, D] / [B, S, D]."""
    if h.ndim == 2:
        h = ad.reshape(h, (1,) + h.shape)
        if z is not None:
            if z.ndim == 1:
                z = ad.reshape(z, (1, 1, z.shape[0]))
            elif z.ndim == 2:
                z = ad.reshape(z, (1,) + z.shape)
            else:
                raise DimensionError(f"guide states {z.shape} do not match "
                                     f"per-sentence encoder states")
        return h, z, True
    if h.ndim == 3:
        if z is not None and z.ndim != 3:
            raise DimensionError("batched routing needs z as [B, S, D]")
        return h, z, False
    raise DimensionError(f"expected [I, D] or [B, I, D] states, got {h.shape}")


def run_guided_routing(h: Tensor, z: Tensor, w_stack: Tensor, w: Tensor,
                       w_b: Tensor, cfg: CapsuleConfig,
                       low_mask: np.ndarray | None = None) -> RoutingState:
    """Full guided routing: n_iterations guided nudges, then a final round.

    All capsule columns are routable; the decoder states z steer the
    logits between rounds. Returns the final RoutingState with
    omega [B, S, J, Dc] (or [S, J, Dc] squeezed for per-sentence input,
    [J, Dc] when z was a single step).
    """
    single_step = h.ndim == 2 and z.ndim == 1
    h3, z3, squeezed = _promote_states(h, z)
    u = project_low_capsules(h3, w_stack)
    bsz, i_len = h3.shape[0], h3.shape[1]
    s_len = z3.shape[1]
    b = Tensor(np.zeros((bsz, s_len, i_len, cfg.n_capsules),
                        dtype=h3.data.dtype))
    for _ in range(cfg.n_iterations):
        state = routing_round(u, b, None, low_mask)
        b = guided_update(b, u, state.omega, z3, w, w_b)
    state = routing_round(u, b, None, low_mask)
    if squeezed:
        state = _squeeze_state(state, drop_step=single_step)
    return state


def run_masked_routing(h: Tensor, group: GroupMask, w_stack: Tensor,
                       cfg: CapsuleConfig,
                       row_mask: np.ndarray | None = None,
                       use_agreement: bool = True) -> RoutingState:
    """Extraction routing confined to one capsule group.

    row_mask [B, S, I] selects which encoder rows may contribute for each
    extraction target (per-step prefixes or suffixes); None means every
    row votes. Logits grow by the plain dot agreement u . omega between
    rounds unless use_agreement is False. Columns outside the group come
    back as exact zeros.
    """
    h3, _, squeezed = _promote_states(h, None)
    u = project_low_capsules(h3, w_stack)
    bsz, i_len = h3.shape[0], h3.shape[1]
    if row_mask is None:
        s_len = 1
    else:
        row_mask = np.asarray(row_mask, dtype=bool)
        if row_mask.ndim == 1:
            row_mask = row_mask[None, None]
        s_len = row_mask.shape[1]
    b = Tensor(np.zeros((bsz, s_len, i_len, cfg.n_capsules),
                        dtype=h3.data.dtype))
    allowed = Tensor(group.allowed.astype(h3.data.dtype))
    for _ in range(cfg.n_iterations):
        state = routing_round(u, b, group, row_mask)
        if use_agreement:
            dot = ad.einsum2("bijc,bsjc->bsij", u, state.omega)
            b = b + dot * allowed
    state = routing_round(u, b, group, row_mask)
    if squeezed:
        state = _squeeze_state(state, drop_step=True)
    return state


def _squeeze_state(state: RoutingState, drop_step: bool) -> RoutingState:
    """Strip the batch axis (and the step axis for single-step calls)."""

    def cut(t: Tensor) -> Tensor:
        shape = t.shape[1:]
        if drop_step:
            shape = shape[1:]
        return ad.reshape(t, shape)

    return RoutingState(b=cut(state.b), c=cut(state.c), s=cut(state.s),
                        omega=cut(state.omega))


def split_groups(omega: Tensor,
                 cfg: CapsuleConfig) -> tuple[Tensor, Tensor, Tensor]:
    """(past, future, redundant) views of the capsule axis."""
    return (omega[..., cfg.past_slice, :],
            omega[..., cfg.future_slice, :],
            omega[..., cfg.redundant_slice, :])
