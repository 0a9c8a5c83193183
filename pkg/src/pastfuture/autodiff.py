"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays wrapped in Tensor, a Tape
that records one forward pass while active (context manager), and
backward() which consumes the tape exactly once. Gradients accumulate
into the .grad field of leaf tensors; leaves that were registered on the
tape but are unreachable from the loss receive zeros.

float64 is the default dtype so finite-difference checks are meaningful;
training runs opt into float32 for speed. Operations executed while no
tape is active run forward-only and keep no references, which is the
inference mode.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A numpy array plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._node: int = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; scalars are wrapped as constants of matching dtype
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


class _Node:
    __slots__ = ("inputs", "backward_fn")

    def __init__(self, inputs: tuple, backward_fn: Optional[Callable]):
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Records one forward pass. One backward() per tape, then it is spent."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: list[tuple[int, Tensor]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise ContractError("tape context exited out of order")

    def _register_leaf(self, t: Tensor) -> int:
        node_id = len(self._nodes)
        self._nodes.append(_Node((), None))
        t._tape = self
        t._node = node_id
        if t.requires_grad:
            self._leaves.append((node_id, t))
        return node_id


_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _STACK[-1] if _STACK else None


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


def _apply(out_data: np.ndarray, inputs: Sequence[Tensor],
           backward_fn: Callable) -> Tensor:
    """Build the output tensor, recording the op if a live tape wants it."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None or tape.consumed:
        return out
    if not any(_tracked(t, tape) for t in inputs):
        return out
    ids = []
    for t in inputs:
        if _tracked(t, tape):
            if t._tape is not tape:
                tape._register_leaf(t)
            ids.append(t._node)
        else:
            ids.append(-1)
    node_id = len(tape._nodes)
    tape._nodes.append(_Node(tuple(ids), backward_fn))
    out._tape = tape
    out._node = node_id
    out.requires_grad = True
    return out


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into every leaf registered on loss's tape."""
    if loss.size != 1:
        raise ContractError(
            f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss is not attached to any tape")
    if tape.consumed:
        raise ContractError("backward was already called on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    for node_id in range(len(tape._nodes) - 1, -1, -1):
        node = tape._nodes[node_id]
        if node.backward_fn is None:
            continue  # leaf; its gradient stays for the deposit pass below
        g = grads.pop(node_id, None)
        if g is None:
            continue
        for inp_id, ginp in zip(node.inputs, node.backward_fn(g)):
            if inp_id < 0 or ginp is None:
                continue
            held = grads.get(inp_id)
            grads[inp_id] = ginp if held is None else held + ginp
    for node_id, leaf in tape._leaves:
        g = grads.get(node_id)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    tape._nodes = []  # free closure captures
    tape._leaves = []


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _apply(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _apply(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    da, db = a.data, b.data

    def bw(g):
        return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)

    return _apply(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    da, db = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g / db, da.shape)
        gb = _unbroadcast(-g * da / (db * db), db.shape)
        return ga, gb

    return _apply(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _apply(-a.data, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _apply(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    out = np.where(keep, a.data, 0.0)

    def bw(g):
        return (g * keep,)

    return _apply(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops

def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _apply(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.data.size if axis is None else np.prod(
        [shape[ax] for ax in np.atleast_1d(axis)])

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _apply(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _apply(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply(a.data.transpose(axes), (a,),
                  lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply(out, tuple(tensors), bw)


def getitem(a: Tensor, key) -> Tensor:
    """Basic indexing only (ints, slices, Ellipsis). Use gather_rows for ids."""
    out = a.data[key]
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return _apply(out, (a,), bw)


def mask_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True with a constant; their grad is 0."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data)

    def bw(g):
        return (np.where(mask, 0.0, g),)

    return _apply(out, (a,), bw)


# ---------------------------------------------------------------------------
# contractions

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    da, db = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(db, -1, -2), da.shape)
        gb = _unbroadcast(np.swapaxes(da, -1, -2) @ g, db.shape)
        return ga, gb

    return _apply(out, (a, b), bw)


def einsum2(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum restricted to plain contractions.

    No ellipsis, no repeated index within one operand, and every input index
    must appear in the output or in the other operand; under those rules the
    gradient is the einsum with the roles of output and operand swapped.
    """
    try:
        ins, out_idx = subscripts.replace(" ", "").split("->")
        in1, in2 = ins.split(",")
    except ValueError as exc:
        raise ContractError(f"einsum2 spec {subscripts!r} must look like "
                            "'ab,bc->ac'") from exc
    for part in (in1, in2, out_idx):
        if "." in part:
            raise ContractError("einsum2 does not support ellipsis")
        if len(set(part)) != len(part):
            raise ContractError(
                f"einsum2 operand spec {part!r} repeats an index")
    if not set(in1) <= set(out_idx) | set(in2):
        raise ContractError(f"index lost from first operand in {subscripts!r}")
    if not set(in2) <= set(out_idx) | set(in1):
        raise ContractError(f"index lost from second operand in {subscripts!r}")
    out = np.einsum(subscripts, a.data, b.data, optimize=True)
    da, db = a.data, b.data

    def bw(g):
        ga = np.einsum(f"{out_idx},{in2}->{in1}", g, db, optimize=True)
        gb = np.einsum(f"{out_idx},{in1}->{in2}", g, da, optimize=True)
        return ga, gb

    return _apply(out, (a, b), bw)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """table[ids] for an integer id array; scatter-add on the way back."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"gather id out of range [0, {table.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}")
    out = table.data[ids]
    shape, dtype = table.shape, table.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _apply(out, (table,), bw)


# ---------------------------------------------------------------------------
# fused numerical ops

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along one axis. Safe for -1e9 masking values."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _apply(out, (a,), bw)


def l2_norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along one axis; gradient is 0 at the origin."""
    n_keep = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    out = n_keep if keepdims else np.squeeze(n_keep, axis=axis)
    da = a.data

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.maximum(n_keep, np.finfo(da.dtype).tiny)
        return (g * da / safe,)

    return _apply(out, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise DimensionError(
            f"layer_norm affine shape {gain.shape}/{bias.shape} does not "
            f"match feature dim of {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = gain.data * xhat + bias.data
    n = a.shape[-1]
    lead = tuple(range(a.ndim - 1))
    gdata = gain.data

    def bw(g):
        gh = g * gdata
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).sum(axis=lead) if lead else g * xhat
        gbias = g.sum(axis=lead) if lead else g
        return gx, ggain, gbias

    return _apply(out, (a, gain, bias), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_id=None,
                  label_smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood over non-pad positions.

    logits: [..., V]; targets: integer array matching the leading shape.
    Positions whose target equals pad_id are excluded from the mean.
    """
    vocab = logits.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(
            f"targets shape {targets.shape} does not match logits "
            f"{logits.shape}")
    flat = logits.data.reshape(-1, vocab)
    tgt = targets.reshape(-1)
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise IndexError(
            f"target id out of range [0, {vocab}): min {tgt.min()}, "
            f"max {tgt.max()}")
    keep = np.ones(tgt.shape, dtype=bool) if pad_id is None else tgt != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ContractError("empty loss: every target position is padding")

    shifted = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(tgt.size)
    nll = -logp[rows, tgt]
    if label_smoothing > 0.0:
        uniform = -logp.mean(axis=-1)
        nll = (1.0 - label_smoothing) * nll + label_smoothing * uniform
    loss = np.asarray((nll * keep).sum() / count, dtype=logits.data.dtype)

    lead_shape = logits.shape
    ls = label_smoothing

    def bw(g):
        prob = np.exp(logp)
        q = np.zeros_like(prob)
        q[rows, tgt] = 1.0 - ls
        if ls > 0.0:
            q += ls / vocab
        d = (prob - q) * (keep[:, None] * (float(g) / count))
        return (d.reshape(lead_shape),)

    return _apply(loss, (logits,), bw)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout. rate=0 is the identity; rng is required otherwise."""
    if rate == 0.0:
        return a
    if not 0.0 < rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ContractError("dropout with rate > 0 needs a generator")
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(a.shape) >= rate).astype(a.data.dtype) * scale
    return mul(a, Tensor(mask))


def detach(a: Tensor) -> Tensor:
    """A constant copy of a: same values, no gradient path."""
    return a.detach()


# ---------------------------------------------------------------------------
# verification

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between reverse-mode and central differences.

    f must be a deterministic scalar-valued function of x (it may close over
    other tensors; only x is perturbed). Relative error per coordinate is
    |a - n| / max(1e-8, |a| + |n|). With max_coords set, a random subset of
    coordinates is probed, which keeps large models affordable.
    """
    if x.data.dtype != np.float64:
        raise ContractError("grad_check requires a float64 tensor")
    x.grad = None
    with Tape():
        y = f(x)
        if y.size != 1:
            raise ContractError("grad_check needs a scalar-valued function")
        if y._tape is not None:
            backward(y)
    # a constant f leaves no tape; its gradient is identically zero
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    total = flat.size
    if max_coords is not None and max_coords < total:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(total, size=max_coords, replace=False)
    else:
        coords = np.arange(total)

    worst = 0.0
    aflat = analytic.reshape(-1)
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + eps
        hi = f(x).item()
        flat[idx] = orig - eps
        lo = f(x).item()
        flat[idx] = orig
        numeric = (hi - lo) / (2.0 * eps)
        err = abs(aflat[idx] - numeric) / max(1e-8,
                                              abs(aflat[idx]) + abs(numeric))
        worst = max(worst, err)
    return worst
